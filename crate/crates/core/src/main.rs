fn main() {
    std::process::exit(crossing_profiler::cli::main_with_exit_code());
}
