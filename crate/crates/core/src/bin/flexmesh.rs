fn main() {
    std::process::exit(flexmesh::cli::run_from_args(std::env::args_os()));
}
