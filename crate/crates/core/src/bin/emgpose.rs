fn main() {
    std::process::exit(emgpose::cli::main_with(std::env::args_os()));
}
