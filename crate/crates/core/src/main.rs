fn main() {
    std::process::exit(aedkit::cli::run(std::env::args_os()));
}
