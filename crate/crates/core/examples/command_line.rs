//! Drives the `iot` command line in-process, as the binary would.

fn main() {
    let code = sparse_iot::cli::main_with_args(["iot", "certificate", "--n", "5", "--eps", "1,10"]);
    eprintln!("exit code {code}");
}
