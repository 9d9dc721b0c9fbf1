fn main() -> std::process::ExitCode {
    cmgen::harness::cli::main()
}
