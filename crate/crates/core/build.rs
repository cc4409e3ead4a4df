// Link the system OpenBLAS (provides BLAS + LAPACK + LAPACKE) for
// ndarray-linalg, which ships FFI declarations but no backend of its own.
fn main() {
    println!("cargo:rustc-link-lib=dylib=openblas");
}
