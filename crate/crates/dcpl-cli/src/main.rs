fn main() {
    std::process::exit(dcpl_cli::run(std::env::args_os()));
}
