fn main() {
    std::process::exit(pdpo::cli::parse_and_dispatch(std::env::args_os().skip(1)));
}
