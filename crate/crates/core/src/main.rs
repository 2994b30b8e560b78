fn main() {
    std::process::exit(sgsformer::cli::main_with(std::env::args_os()));
}
