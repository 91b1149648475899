fn main() -> std::process::ExitCode {
    pden::cli::main()
}
