fn main() -> std::process::ExitCode {
    zsseg::cli::main_entry()
}
