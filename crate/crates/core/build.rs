// The PSD cone in the conic backend calls into LAPACK; use the system OpenBLAS.
fn main() {
    println!("cargo:rustc-link-lib=openblas");
}
