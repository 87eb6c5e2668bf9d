fn main() {
    std::process::exit(ppst::cli::main_with_args(std::env::args_os()));
}
