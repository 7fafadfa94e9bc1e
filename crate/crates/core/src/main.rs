fn main() {
    std::process::exit(endprompt_lab::cli::main_with_args(std::env::args_os()));
}
