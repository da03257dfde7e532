fn main() -> std::process::ExitCode {
    rlpf_cli::main_with_args(std::env::args_os())
}
