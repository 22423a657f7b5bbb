fn main() {
    std::process::exit(sgm_cli::run(std::env::args_os()));
}
