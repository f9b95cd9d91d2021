fn main() {
    std::process::exit(gradts_cli::main_with_args(std::env::args_os()));
}
