fn main() {
    let env: Vec<(String, String)> = std::env::vars().collect();
    std::process::exit(dfa::cli::main_with(std::env::args_os(), &env));
}
