fn main() {
    std::process::exit(etmpc::cli::run(std::env::args_os()));
}
