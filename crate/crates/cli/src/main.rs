fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(wasr_cli::main_exit_code(&args));
}
