fn main() {
    std::process::exit(tat::cli::run(std::env::args_os()));
}
