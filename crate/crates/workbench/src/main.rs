fn main() {
    std::process::exit(pvad_workbench::cli::run(std::env::args_os()));
}
