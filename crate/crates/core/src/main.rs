fn main() {
    let code = mfsb::cli::run(std::env::args_os());
    std::process::exit(code);
}
