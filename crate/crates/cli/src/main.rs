fn main() {
    std::process::exit(icvp_cli::run(std::env::args_os()));
}
