mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tigmt::translate::{SRC_BPE_FILE, TGT_BPE_FILE};

fn tigmt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tigmt"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TIGMT_MODEL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn evaluate_prints_table_and_key_values() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("hyp.txt"), "the cat sat on the mat\na b c\n").unwrap();
    fs::write(dir.path().join("ref.txt"), "the cat is on the mat\na b c\n").unwrap();
    let out = tigmt(&["evaluate", "--hyp", "hyp.txt", "--ref", "ref.txt", "--name", "sys"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("sys"));
    for key in ["system=sys", "bleu=", "chrf=", "meteor_lite="] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tigmt(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(tigmt(&["evaluate", "--hyp", "missing.txt"], dir.path()).status.code(), Some(1));
    let out = tigmt(&["evaluate", "--hyp", "missing.txt", "--ref", "missing.txt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(tigmt(&["--help"], dir.path()).status.success());
}

#[test]
fn tokenize_and_bpe_commands_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("raw.txt"), "ሰላም፡ዓለም። ከመይ ኣለኻ?\nሰላም ዓለም።\n").unwrap();
    let out = tigmt(&["tokenize", "--script", "geez", "--in", "raw.txt", "--out", "tok.txt"], dir.path());
    assert!(out.status.success());
    let tok = fs::read_to_string(dir.path().join("tok.txt")).unwrap();
    assert_eq!(tok.lines().next().unwrap(), "ሰላም ዓለም ። ከመይ ኣለኻ ?");

    let out = tigmt(&["train-bpe", "--merges", "5", "--in", "tok.txt", "--out", "m.bpe", "--vocab", "v.txt"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tigmt(&["apply-bpe", "--model", "m.bpe", "--in", "tok.txt", "--out", "seg.txt"], dir.path());
    assert!(out.status.success());
    let seg = fs::read_to_string(dir.path().join("seg.txt")).unwrap();
    let rebuilt: Vec<String> = seg
        .lines()
        .map(|l| l.replace(' ', "").replace("</w>", " ").trim_end().to_string())
        .collect();
    assert_eq!(rebuilt, tok.lines().collect::<Vec<_>>());
}

#[test]
fn mix_split_and_filter_write_aligned_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("a.src"), "ሀ\nለ\nሐ\nመ\n").unwrap();
    fs::write(p.join("a.tgt"), "h\nl\nh\nm\n").unwrap();
    fs::write(p.join("b.src"), "ሰ\nረ\n").unwrap();
    fs::write(p.join("b.tgt"), "s\nr r r r r r r r r r\n").unwrap();
    fs::write(
        p.join("m.toml"),
        "[[dataset]]\nname = \"a\"\nlanguage = \"tigrinya\"\nsource_path = \"a.src\"\ntarget_path = \"a.tgt\"\nexpected_count = 4\n\n\
         [[dataset]]\nname = \"b\"\nlanguage = \"amharic\"\nsource_path = \"b.src\"\ntarget_path = \"b.tgt\"\n",
    )
    .unwrap();

    let out = tigmt(&["mix", "--manifest", "m.toml", "--seed", "3", "--out-src", "x.src", "--out-tgt", "x.tgt", "--out-tags", "x.tags"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut mixed: Vec<String> = fs::read_to_string(p.join("x.src")).unwrap().lines().map(String::from).collect();
    mixed.sort();
    assert_eq!(mixed, ["ሀ", "ለ", "ሐ", "መ", "ረ", "ሰ"]);
    assert_eq!(fs::read_to_string(p.join("x.tags")).unwrap().lines().count(), 6);

    let out = tigmt(&["split", "--manifest", "m.toml", "--test", "1", "--dev", "2", "--seed", "1", "--out-dir", "parts"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let count = |f: &str| fs::read_to_string(p.join("parts").join(f)).unwrap().lines().count();
    assert_eq!((count("train.src"), count("dev.src"), count("test.src")), (3, 2, 1));
    let dev = tigmt::corpus::Manifest::load(p.join("parts/dev.toml")).unwrap();
    assert_eq!(dev.load_all().unwrap().iter().map(|c| c.len()).sum::<usize>(), 2);

    let out = tigmt(&["filter", "--manifest", "m.toml", "--max-ratio", "3", "--out-src", "f.src", "--out-tgt", "f.tgt"], p);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(p.join("f.src")).unwrap().lines().count(), 5);
    let out = tigmt(&["filter", "--manifest", "m.toml", "--language", "amharic", "--out-src", "g.src", "--out-tgt", "g.tgt"], p);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(p.join("g.src")).unwrap(), "ሰ\n");
}

#[test]
fn translate_prints_one_line_per_input() {
    let dir = tempfile::tempdir().unwrap();
    let translator = common::toy_translator(2);
    translator.checkpoint().save(dir.path().join("toy.ckpt")).unwrap();
    translator.codec().src_bpe.save(dir.path().join(SRC_BPE_FILE)).unwrap();
    translator.codec().tgt_bpe.save(dir.path().join(TGT_BPE_FILE)).unwrap();
    let sentence = common::toy_sentence(2, 3);

    let out = tigmt(&["translate", "--model", "toy.ckpt", "--text", &sentence], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let expected = translator.translate(&sentence, None).unwrap().translation;
    assert_eq!(stdout(&out), format!("{expected}\n"));

    fs::write(dir.path().join("in.txt"), format!("{sentence}\n\n{sentence}\n")).unwrap();
    let out = tigmt(&["translate", "--model", "toy.ckpt", "--in", "in.txt"], dir.path());
    assert_eq!(stdout(&out), format!("{expected}\n\n{expected}\n"));

    let long = common::toy_sentence(2, 40);
    let out = tigmt(&["translate", "--model", "toy.ckpt", "--text", &long], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
