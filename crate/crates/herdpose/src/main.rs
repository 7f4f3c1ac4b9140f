fn main() {
    std::process::exit(herdpose::cli::run(std::env::args_os()));
}
