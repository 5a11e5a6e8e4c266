fn main() {
    std::process::exit(gift::cli::dispatch(std::env::args_os()));
}
