fn main() {
    std::process::exit(motionstyle_core::cli::run(std::env::args_os()));
}
