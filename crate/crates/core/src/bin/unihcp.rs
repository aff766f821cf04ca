fn main() {
    let code = unihcp::cli::main_with(std::env::args_os(), &|k| std::env::var(k).ok());
    std::process::exit(code);
}
