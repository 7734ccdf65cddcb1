fn main() {
    std::process::exit(synthaug_cli::commands::main_with_args(std::env::args_os()));
}
