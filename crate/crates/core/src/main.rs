fn main() -> std::process::ExitCode {
    bsrn::cli::run_from(std::env::args_os())
}
