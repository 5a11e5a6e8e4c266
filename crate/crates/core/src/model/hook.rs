use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::Result;
use crate::model::attention::HeadRows;
use crate::model::layout::SegmentLayout;

/// Callback signature: `(layer, layout of the sequence so far, post-softmax
/// rows of the current position) -> rows used for the value sum`.
pub type SteerFn = dyn Fn(usize, &SegmentLayout, &HeadRows) -> Result<HeadRows> + Send + Sync;

/// Intervention point on the current decoding row.
///
/// The model calls the callback only for enabled layers and only while the
/// hook is enabled; a disabled hook leaves the forward pass untouched.
#[derive(Clone)]
pub struct SteeringHook {
    callback: Option<Arc<SteerFn>>,
    layers: BTreeSet<usize>,
    enabled: bool,
}

impl SteeringHook {
    pub fn disabled() -> Self {
        Self { callback: None, layers: BTreeSet::new(), enabled: false }
    }

    pub fn new<F>(layers: impl IntoIterator<Item = usize>, callback: F) -> Self
    where
        F: Fn(usize, &SegmentLayout, &HeadRows) -> Result<HeadRows> + Send + Sync + 'static,
    {
        Self {
            callback: Some(Arc::new(callback)),
            layers: layers.into_iter().collect(),
            enabled: true,
        }
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled && self.callback.is_some()
    }

    pub fn layers(&self) -> &BTreeSet<usize> {
        &self.layers
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        self.is_enabled() && self.layers.contains(&layer)
    }

    pub(crate) fn call(
        &self,
        layer: usize,
        layout: &SegmentLayout,
        rows: &HeadRows,
    ) -> Option<Result<HeadRows>> {
        if !self.applies_to(layer) {
            return None;
        }
        self.callback.as_ref().map(|f| f(layer, layout, rows))
    }
}

impl Default for SteeringHook {
    fn default() -> Self {
        Self::disabled()
    }
}

impl fmt::Debug for SteeringHook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SteeringHook")
            .field("layers", &self.layers)
            .field("enabled", &self.enabled)
            .field("has_callback", &self.callback.is_some())
            .finish()
    }
}
