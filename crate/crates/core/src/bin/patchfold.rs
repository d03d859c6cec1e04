fn main() {
    std::process::exit(patchfold::cli::run_from(std::env::args_os()));
}
