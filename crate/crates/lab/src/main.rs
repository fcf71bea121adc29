fn main() {
    std::process::exit(faster_lab::cli::run(std::env::args_os()));
}
