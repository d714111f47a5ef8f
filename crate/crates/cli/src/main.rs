fn main() {
    std::process::exit(powerhue_cli::main_with_args(std::env::args_os()));
}
