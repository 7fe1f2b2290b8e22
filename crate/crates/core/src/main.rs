fn main() {
    std::process::exit(ssc_core::cli::run(std::env::args_os()));
}
