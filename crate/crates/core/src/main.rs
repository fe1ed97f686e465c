fn main() {
    std::process::exit(dfm_core::cli::main_impl());
}
