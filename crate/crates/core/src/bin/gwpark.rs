fn main() {
    std::process::exit(gwpark::cli::run(std::env::args_os()));
}
