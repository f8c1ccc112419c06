use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use semsr::degradation::{
    assemble_training_set, crop_overlapping_patches, grid_offsets, mix_branch, synth_degrade, Branch, DatasetConfig,
    DatasetManifest, DegradationRecipe,
};
use semsr::imaging::{downsample, Image};
use semsr::toy::toy_image;

#[test]
fn mixing_is_balanced_and_seeded() {
    let count = |seed| {
        (0..10_000)
            .filter(|i| mix_branch(&format!("img_{i:05}"), seed) == Branch::DownsampleOnly)
            .count()
    };
    let n = count(42);
    assert!((4800..=5200).contains(&n), "downsample-only draws: {n}");
    assert_eq!(n, count(42));
    assert_eq!(mix_branch("a", 1), mix_branch("a", 1));
}

fn write_sources(root: &Path) {
    let lsdir = root.join("lsdir");
    let pairs = root.join("ugc_pairs");
    let ugc_hr = root.join("ugc_hr");
    for d in [&lsdir, &pairs.join("hr"), &pairs.join("lr"), &ugc_hr] {
        std::fs::create_dir_all(d).unwrap();
    }
    for i in 0..4 {
        toy_image(96, 1, i).save(&lsdir.join(format!("ls{i}.png"))).unwrap();
    }
    for i in 0..2 {
        let hr = toy_image(64, 2, i);
        hr.save(&pairs.join("hr").join(format!("p{i}.png"))).unwrap();
        downsample(&hr, 4).unwrap().save(&pairs.join("lr").join(format!("p{i}.png"))).unwrap();
        toy_image(64, 3, i).save(&ugc_hr.join(format!("u{i}.png"))).unwrap();
    }
    std::fs::write(lsdir.join("broken.png"), b"not an image").unwrap();
}

fn config(root: &Path) -> DatasetConfig {
    DatasetConfig {
        lsdir_dir: Some(root.join("lsdir")),
        ugc_pairs_dir: Some(root.join("ugc_pairs")),
        ugc_hr_dir: Some(root.join("ugc_hr")),
        patch_size: 32,
        stride: Some(16),
        ..Default::default()
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn rebuild_is_byte_identical() {
    let src = tempfile::tempdir().unwrap();
    write_sources(src.path());
    let cfg = config(src.path());
    let out = tempfile::tempdir().unwrap();
    let a = assemble_training_set(&cfg, 7, &out.path().join("a")).unwrap();
    let b = assemble_training_set(&cfg, 7, &out.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!(tree_bytes(&out.path().join("a")), tree_bytes(&out.path().join("b")));
    assert_eq!(a.header.skipped.len(), 1);

    let read = DatasetManifest::read(&out.path().join("a").join("manifest.jsonl")).unwrap();
    assert_eq!(read, a);
    let total: usize = a.header.component_counts.values().sum();
    assert_eq!(total, a.records.len());
    let recs = read.load_records(&out.path().join("a")).unwrap();
    assert_eq!(recs.len(), a.records.len());
    for r in &recs {
        let lr = if r.branch == Branch::WildDegraded { 32 } else { 8 };
        assert_eq!((r.hr_patch.width(), r.lr_patch.width()), (32, lr));
    }
    let c = assemble_training_set(&cfg, 8, &out.path().join("c")).unwrap();
    assert_ne!(tree_bytes(&out.path().join("a")), tree_bytes(&out.path().join("c")));
    assert_eq!(c.header.global_seed, 8);
}

#[test]
fn missing_components_are_allowed() {
    let src = tempfile::tempdir().unwrap();
    write_sources(src.path());
    let cfg = DatasetConfig {
        ugc_pairs_dir: None,
        ugc_hr_dir: None,
        ..config(src.path())
    };
    let out = tempfile::tempdir().unwrap();
    let m = assemble_training_set(&cfg, 7, out.path()).unwrap();
    assert_eq!(m.count(Branch::SyntheticPair), 0);
    assert_eq!(m.count(Branch::WildDegraded), 0);
    assert!(m.count(Branch::DownsampleOnly) + m.count(Branch::Degrade) > 0);
}

#[test]
fn synthetic_degradation_quarters_the_size() {
    let hr = toy_image(64, 9, 0);
    let lr = synth_degrade(&hr, &DegradationRecipe::synthetic_default(), 3).unwrap();
    assert_eq!((lr.width(), lr.height()), (16, 16));
    assert_eq!(lr, synth_degrade(&hr, &DegradationRecipe::synthetic_default(), 3).unwrap());
    assert!(lr.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #[test]
    fn offsets_cover_the_axis(len in 8usize..200, patch_q in 1usize..8, stride_q in 1usize..8) {
        let (patch, stride) = (patch_q * 4, stride_q * 4);
        prop_assume!(patch <= len);
        let offs = grid_offsets(len, patch, stride).unwrap();
        prop_assert_eq!(offs[0], 0);
        prop_assert_eq!(*offs.last().unwrap() + patch, len);
        for w in offs.windows(2) {
            prop_assert!(w[1] > w[0] && w[1] - w[0] <= stride);
        }
    }

    #[test]
    fn crops_stay_aligned(w4 in 4usize..16, h4 in 4usize..16) {
        let hr = Image::from_fn(w4 * 4, h4 * 4, |x, y, c| ((x * 3 + y * 5 + c) % 11) as f32 / 10.0);
        let lr = downsample(&hr, 4).unwrap();
        for p in crop_overlapping_patches(&hr, &lr, 16, 8).unwrap() {
            let (y, x) = p.hr_offset;
            prop_assert_eq!(x % 4, 0);
            prop_assert_eq!(y % 4, 0);
            prop_assert_eq!(&p.hr, &hr.crop(x, y, 16, 16).unwrap());
            prop_assert_eq!(&p.lr, &lr.crop(x / 4, y / 4, 4, 4).unwrap());
        }
    }
}
