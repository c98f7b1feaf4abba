fn main() {
    std::process::exit(wanlab::cli::dispatch(std::env::args().collect()));
}
