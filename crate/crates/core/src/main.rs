fn main() {
    std::process::exit(mtseg::cli::main_with_args(std::env::args_os()));
}
