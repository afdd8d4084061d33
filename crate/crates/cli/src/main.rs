fn main() {
    std::process::exit(read_lab_cli::run(std::env::args_os()));
}
