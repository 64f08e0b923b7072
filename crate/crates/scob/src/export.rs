//! Qualitative CAM export: portable graymap images of activations and
//! masks plus a summary CSV.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use crate::cam::{e_step_for_class, normalize_minmax, upsample_to_bytes};
use crate::data::ImageSample;
use crate::error::Result;
use crate::nn::{MaskPair, ModelConfig, ParamSet};

/// Binary PGM (P5), maxval 255.
pub fn write_pgm(path: &Path, bytes: &[u8], width: usize, height: usize) -> Result<()> {
    let mut f = File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

/// For up to `limit` samples, extract activations and masks for every
/// positive class, write grayscale images, and return CSV rows of
/// `sample_id,class,stage,foreground_fraction`.
pub fn export_cams(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    samples: &[ImageSample],
    gamma_cam: f64,
    limit: usize,
    out_dir: &Path,
) -> Result<String> {
    std::fs::create_dir_all(out_dir)?;
    let size = model_cfg.image_size;
    let zeros = MaskPair::zeros(model_cfg);
    let mut csv = String::from("sample_id,class,stage,foreground_fraction\n");
    for sample in samples.iter().take(limit) {
        for class in 0..model_cfg.num_classes {
            if sample.y[class] != 1 {
                continue;
            }
            let out = e_step_for_class(params, model_cfg, &sample.pixels, Some(class), gamma_cam, &zeros)?;
            for (act, mask, stage) in [
                (&out.activations[0], &out.masks.stage3, 3u8),
                (&out.activations[1], &out.masks.stage4, 4u8),
            ] {
                let norm = normalize_minmax(act).unwrap_or_else(|| act.clone());
                let act_img = upsample_to_bytes(&norm.grid, norm.h, norm.w, size);
                let mask_img = upsample_to_bytes(mask, act.h, act.w, size);
                write_pgm(
                    &out_dir.join(format!("cam_{:05}_c{class}_s{stage}_act.pgm", sample.id)),
                    &act_img,
                    size,
                    size,
                )?;
                write_pgm(
                    &out_dir.join(format!("cam_{:05}_c{class}_s{stage}_mask.pgm", sample.id)),
                    &mask_img,
                    size,
                    size,
                )?;
                let fg = mask.iter().sum::<f64>() / mask.len() as f64;
                let _ = writeln!(csv, "{},{class},{stage},{fg}", sample.id);
            }
        }
    }
    std::fs::write(out_dir.join("cams.csv"), &csv)?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::nn::{init_params, tiny_config};

    #[test]
    fn pgm_header_and_payload() {
        let dir = std::env::temp_dir().join("scob-pgm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.pgm");
        write_pgm(&path, &[0, 128, 255, 64], 2, 2).unwrap();
        let data = std::fs::read(&path).unwrap();
        assert!(data.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&data[data.len() - 4..], &[0, 128, 255, 64]);
    }

    #[test]
    fn cam_export_writes_files_and_csv() {
        let mut cfg = tiny_config();
        cfg.image_size = 64;
        cfg.num_classes = 6;
        let params = init_params(&cfg, 3).unwrap();
        let spec = DatasetSpec {
            num_train: 1,
            num_val: 2,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let dir = std::env::temp_dir().join("scob-camexport-test");
        let _ = std::fs::remove_dir_all(&dir);
        let csv = export_cams(&params, &cfg, &ds.val, 0.5, 2, &dir).unwrap();
        assert!(csv.lines().count() > 1);
        assert!(dir.join("cams.csv").exists());
        let n_pgm = std::fs::read_dir(&dir)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .map(|x| x == "pgm")
                    .unwrap_or(false)
            })
            .count();
        assert!(n_pgm >= 4, "expected activation and mask images per stage");
    }
}
