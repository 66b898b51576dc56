//! End-to-end plumbing on a model small enough to train in seconds. Quality is
//! not checked here; see the acceptance test for that.

use std::fs;
use std::path::Path;

use styleswap::config::RunConfig;
use styleswap::decode::DecodeConfig;
use styleswap::pipeline::{
    ablation_variants, generate_file, read_sequences, run_ablation, run_pipeline, write_sequences,
};
use styleswap::store;
use styleswap::styledata::{Style, TaskKind};
use styleswap::{AdapterSet, Model32};

fn tiny_config() -> RunConfig {
    RunConfig::parse(
        "preset=toy
d_model=8
n_heads=2
d_ffn=12
n_enc_layers=1
n_dec_layers=1
adapter_bottleneck=2
task_pairs=60
style_sentences=60
pretrain_sentences=60
pretrain_epochs=1
adapter_epochs=1
task_epochs=1
max_valid=4
eval_examples=3
decode_max_len=8
",
    )
    .unwrap()
}

fn sink() -> Vec<u8> {
    Vec::new()
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn adapters_do_not_depend_on_downstream_tasks() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = run_pipeline::<f32>(tiny_config(), a.path(), &[TaskKind::Headline], &mut sink()).unwrap();
    let two = run_pipeline::<f32>(tiny_config(), b.path(), &TaskKind::ALL, &mut sink()).unwrap();
    assert_eq!(one.adapter_files.len(), 4);
    for (x, y) in one.adapter_files.iter().zip(&two.adapter_files) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(bytes(x), bytes(y), "{}", x.display());
    }
    // M task bases + (N + 1) adapter sets
    assert_eq!(two.task_checkpoints.len() + two.adapter_files.len(), 2 + 4);
    assert_eq!(fs::read_dir(b.path().join("adapters")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(b.path().join("tasks")).unwrap().count(), 2);
    // one report per (task, style)
    assert_eq!(two.reports.len(), 2 * 4);
    assert_eq!(fs::read_dir(b.path().join("reports")).unwrap().count(), 8);
    assert_eq!(one.base_checksum, two.base_checksum);
}

#[test]
fn reruns_are_byte_identical_and_resume_cleanly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline::<f32>(tiny_config(), a.path(), &[TaskKind::Story], &mut sink()).unwrap();
    run_pipeline::<f32>(tiny_config(), b.path(), &[TaskKind::Story], &mut sink()).unwrap();
    for sub in [
        "base.ckpt",
        "tasks/story.inverse-para.enc.ckpt",
        "adapters/s2.inverse-para.adapter",
        "outputs/story.inverse-para.enc.s1.txt",
        "reports/story.inverse-para.enc.s3.metrics",
        "data/story.test.src",
    ] {
        assert_eq!(bytes(&a.path().join(sub)), bytes(&b.path().join(sub)), "{sub}");
    }
    // resuming reuses artifacts and leaves them untouched
    let before = bytes(&a.path().join("tasks/story.inverse-para.enc.ckpt"));
    run_pipeline::<f32>(tiny_config(), a.path(), &[TaskKind::Story], &mut sink()).unwrap();
    assert_eq!(before, bytes(&a.path().join("tasks/story.inverse-para.enc.ckpt")));

    // a different configuration is refused
    let mut other = tiny_config();
    other.seed = 99;
    assert!(run_pipeline::<f32>(other, a.path(), &[TaskKind::Story], &mut sink()).is_err());
}

#[test]
fn ablation_grid_has_seven_rows_per_task() {
    assert_eq!(ablation_variants().len(), 7);
    let dir = tempfile::tempdir().unwrap();
    let rows = run_ablation::<f32>(tiny_config(), dir.path(), &[TaskKind::Headline], &mut sink()).unwrap();
    assert_eq!(rows.len(), 7);
    let tsv = fs::read_to_string(dir.path().join("ablation/headline.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 7);
    for row in &rows {
        assert_eq!(row.report.marker.len(), 3);
    }
}

#[test]
fn generate_file_keeps_order_and_handles_empty_input() {
    let cfg = tiny_config();
    let mut m = Model32::build(cfg.model.clone()).unwrap();
    m.swap_adapters(AdapterSet::fresh(&cfg.model, "s0", 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.txt"), dir.path().join("out.txt"));
    let sources = vec![vec![4, 5, 6], vec![60, 7], vec![8], vec![4, 5, 6]];
    write_sequences(&input, &sources).unwrap();
    let dc = DecodeConfig {
        max_len: 6,
        ..cfg.decode_config()
    };
    assert_eq!(generate_file(&m, &input, &output, &dc).unwrap(), 4);
    let outs = read_sequences(&output).unwrap();
    for (src, out) in sources.iter().zip(&outs) {
        let single = styleswap::decode::generate(&m, src, &dc).unwrap();
        assert_eq!(&single.tokens, out);
    }
    assert_eq!(outs[0], outs[3]);
    let input_bytes = bytes(&input);
    generate_file(&m, &input, &output, &dc).unwrap();
    assert_eq!(bytes(&input), input_bytes, "input mutated");

    fs::write(&input, "").unwrap();
    assert_eq!(generate_file(&m, &input, &output, &dc).unwrap(), 0);
    assert_eq!(fs::read_to_string(&output).unwrap(), "");

    fs::write(&input, "k1 k2\nk3 nonsense\n").unwrap();
    let err = generate_file(&m, &input, &output, &dc).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
}

#[test]
fn installed_adapter_files_change_nothing_but_the_slot() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_pipeline::<f32>(tiny_config(), dir.path(), &[TaskKind::Headline], &mut sink()).unwrap();
    let mut m: Model32 = store::load_checkpoint(&s.task_checkpoints[0]).unwrap();
    let base = m.base_checksum();
    for (style, path) in Style::ALL.iter().zip(&s.adapter_files) {
        let file = store::load_adapter::<f32>(path, &mut m).unwrap();
        assert_eq!(file.adapters.style_id, style.as_str());
        assert_eq!(m.base_checksum(), base);
    }
}
