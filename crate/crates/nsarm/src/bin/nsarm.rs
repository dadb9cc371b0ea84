fn main() {
    nsarm::cli::main();
}
