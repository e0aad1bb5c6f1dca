fn main() {
    std::process::exit(tddsense_cli::main_with(std::env::args_os()));
}
