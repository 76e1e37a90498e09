fn main() {
    std::process::exit(grplasso_te::cli::run(std::env::args_os()));
}
