fn main() -> std::process::ExitCode {
    deeptraverse::cli::main_with_args(std::env::args_os())
}
