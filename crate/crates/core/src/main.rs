fn main() {
    std::process::exit(clockwork::cli::dispatch(std::env::args_os().skip(1)));
}
