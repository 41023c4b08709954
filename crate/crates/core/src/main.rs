fn main() {
    std::process::exit(cgm_wide_deep::cli::run(std::env::args_os()));
}
