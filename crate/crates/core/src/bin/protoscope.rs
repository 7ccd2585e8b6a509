fn main() {
    std::process::exit(protoscope::cli::run(std::env::args_os()));
}
