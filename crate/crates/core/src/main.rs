fn main() {
    let code = dynauc::cli::run(std::env::args_os());
    std::process::exit(code);
}
