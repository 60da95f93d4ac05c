fn main() -> std::process::ExitCode {
    ncedf::cli::main()
}
