fn main() {
    std::process::exit(wvad_core::cli::run(std::env::args_os()));
}
