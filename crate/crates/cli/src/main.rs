fn main() {
    std::process::exit(ctn_cli::run(std::env::args_os()));
}
