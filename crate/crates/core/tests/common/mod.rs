#![allow(dead_code)]

use std::path::Path;

use kgcrs_core::harness::Corpus;
use kgcrs_core::synthetic::{planted_fixture, FixtureFiles, FixtureOptions};
use kgcrs_core::Config;

/// Small widths and a couple of epochs per stage; fast, not accurate.
pub const TINY: &str = r#"
ent_dim = 8
ctx_dim = 16
enc_layers = 1
enc_heads = 2
max_ctx_len = 48
dec_layers = 1
dec_heads = 2
vocab_size = 120
max_len = 8
k_tail = 8
batch_size = 8
pretrain_epochs = 2
rec_epochs = 2
gen_epochs = 2
"#;

pub fn tiny() -> Config {
    Config::from_toml_str(TINY).unwrap()
}

pub fn fixture(dir: &Path) -> (FixtureFiles, Corpus) {
    let files = planted_fixture(&FixtureOptions::default()).unwrap().write(dir).unwrap();
    let corpus = Corpus::load(&files.kg, &files.dialogues).unwrap();
    (files, corpus)
}
