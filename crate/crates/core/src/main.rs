fn main() -> std::process::ExitCode {
    dynopool::cli::main()
}
