fn main() {
    std::process::exit(fuseloc::cli::main_with_args(std::env::args_os()));
}
