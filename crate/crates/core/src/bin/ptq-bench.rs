fn main() {
    std::process::exit(ptq_reliability::experiment::cli_main(std::env::args_os()));
}
