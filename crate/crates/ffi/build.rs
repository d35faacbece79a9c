use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml")).expect("cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("generate C header");
    let out = PathBuf::from(std::env::var("OUT_DIR").unwrap()).join("blora.h");
    bindings.write_to_file(&out);
    let include = crate_dir.join("include");
    std::fs::create_dir_all(&include).expect("create include/");
    // write_to_file only touches the file when the content changed
    bindings.write_to_file(include.join("blora.h"));
}
