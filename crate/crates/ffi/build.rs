fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        pragma_once: true,
        include_version: true,
        cpp_compat: true,
        documentation: true,
        header: Some("/* C interface of the mvsr multi-view stereo engine. */".to_string()),
        ..Default::default()
    };
    match cbindgen::Builder::new().with_crate(&crate_dir).with_config(config).generate() {
        Ok(bindings) => {
            bindings.write_to_file(format!("{crate_dir}/include/mvsr.h"));
        }
        Err(e) => {
            // keep builds working even when the header cannot be refreshed
            // (e.g. macro-expansion limits on exotic toolchains)
            println!("cargo:warning=cbindgen failed: {e}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
