//! Token-retention rasters: which patches survive each layer, and how.
//!
//! One binary PPM (P6) per layer plus the patchified input. Every patch is
//! painted by its fate after that layer: pruned patches are black, patches
//! folded into a merge group share a color derived only from the group's
//! destination token, and kept singletons show their original pixels. With
//! thresholds at initialisation nothing is removed and every panel equals
//! the input — a property the tests check byte for byte.

use crate::model::{model_forward, Checkpoint, ExecMode, ModelConfig, ModelError, TrainableSet};
use crate::reduction::LayerTrace;
use crate::rng::mix64;
use crate::tape::MaskMode;
use crate::tensor::Tensor;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("visualization: {0}")]
    Dim(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Color shared by every member of a merge group: a pure function of the
/// destination token id, kept away from black (pruned) at >= 64 per channel.
pub fn group_color(dest_token: usize) -> [u8; 3] {
    let h = mix64(dest_token as u64 ^ 0x746f_6b65_6e6d_6170);
    [
        64 + (h & 0x7f) as u8,
        64 + ((h >> 8) & 0x7f) as u8,
        64 + ((h >> 16) & 0x7f) as u8,
    ]
}

/// Writes `rgb` (row-major, 3 bytes per pixel) as a binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), VizError> {
    if rgb.len() != width * height * 3 {
        return Err(VizError::Dim(format!(
            "{}x{} raster needs {} bytes, got {}",
            width,
            height,
            width * height * 3,
            rgb.len()
        )));
    }
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{width} {height}\n255\n")?;
    file.write_all(rgb)?;
    Ok(())
}

fn image_to_rgb(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Paints one patch rectangle either from the source image or with a flat
/// color.
fn paint_patch(out: &mut [u8], src: Option<&[u8]>, color: [u8; 3], token: usize, cfg: &ModelConfig) {
    let ps = cfg.patch_size;
    let per_row = cfg.image_size / ps;
    let p = token - 1;
    let y0 = (p / per_row) * ps;
    let x0 = (p % per_row) * ps;
    let stride = cfg.image_size * 3;
    for dy in 0..ps {
        for dx in 0..ps {
            let at = (y0 + dy) * stride + (x0 + dx) * 3;
            let px = match src {
                Some(rgb) => [rgb[at], rgb[at + 1], rgb[at + 2]],
                None => color,
            };
            out[at..at + 3].copy_from_slice(&px);
        }
    }
}

fn render_layer(rgb: &[u8], layer: &LayerTrace, cfg: &ModelConfig) -> Vec<u8> {
    // Start black: any patch not represented by a kept token was pruned.
    let mut out = vec![0u8; rgb.len()];
    for (token, origins) in &layer.kept_origins {
        let token = *token;
        if token == 0 {
            continue; // class token has no patch
        }
        if origins.len() == 1 {
            paint_patch(&mut out, Some(rgb), [0; 3], token, cfg);
        } else {
            let color = group_color(token);
            for &member in origins {
                paint_patch(&mut out, None, color, member, cfg);
            }
        }
    }
    out
}

/// Runs one image through the checkpoint (inference mode, batch 1) and
/// writes `input.ppm` plus `layer_XX.ppm` for every block into `out_dir`.
/// Returns the written paths in panel order.
pub fn visualize_tokens(
    ckpt: &Checkpoint,
    image: &Tensor,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, VizError> {
    let cfg = &ckpt.config;
    if cfg.channels != 3 {
        return Err(VizError::Dim(format!(
            "rasters are RGB; config has {} channels",
            cfg.channels
        )));
    }
    let want = vec![cfg.image_size, cfg.image_size * cfg.channels];
    if image.shape() != want.as_slice() {
        return Err(VizError::Dim(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            want
        )));
    }

    let fwd = model_forward(
        image,
        cfg,
        &ckpt.params,
        &ckpt.thresholds,
        ExecMode::Inference,
        MaskMode::Hard,
        TrainableSet::Frozen,
    )?;

    fs::create_dir_all(out_dir)?;
    let rgb = image_to_rgb(image);
    let side = cfg.image_size;
    let mut paths = Vec::with_capacity(1 + cfg.blocks);

    let input_path = out_dir.join("input.ppm");
    write_ppm(&input_path, side, side, &rgb)?;
    paths.push(input_path);

    for layer in &fwd.trace.layers {
        let panel = render_layer(&rgb, layer, cfg);
        let path = out_dir.join(format!("layer_{:02}.ppm", layer.layer));
        write_ppm(&path, side, side, &panel)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Split, SynthDatasetSpec};
    use crate::model::{ImportanceKind, ReductionOrder};
    use crate::reduction::MergeWeighting;
    use crate::train::{pretrain_backbone, TrainConfig};
    use tempfile::tempdir;

    fn tiny_checkpoint() -> (Checkpoint, Tensor) {
        let model = ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            classes: 4,
            reduction_order: ReductionOrder::Ltmp,
            importance_score: ImportanceKind::MeanColumn,
            topk_k: 2,
            merge_weighting: MergeWeighting::SizeWeighted,
        };
        let data = generate(
            &SynthDatasetSpec {
                classes: 4,
                image_size: 16,
                samples: 2,
                noise: 0.1,
                seed: 21,
            },
            Split::Train,
        )
        .unwrap();
        let mut pretrain_model = model.clone();
        pretrain_model.reduction_order = ReductionOrder::None;
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut ckpt = pretrain_backbone(&data, &data, &pretrain_model, &cfg)
            .unwrap()
            .checkpoint;
        ckpt.config = model;
        (ckpt, data.image_tensor(0))
    }

    fn read_ppm(path: &Path) -> (usize, usize, Vec<u8>) {
        let bytes = fs::read(path).unwrap();
        let header_end = bytes
            .windows(1)
            .enumerate()
            .filter(|(_, w)| w[0] == b'\n')
            .map(|(i, _)| i)
            .nth(2)
            .unwrap()
            + 1;
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut lines = header.lines();
        assert_eq!(lines.next().unwrap(), "P6");
        let mut dims = lines.next().unwrap().split_whitespace();
        let w: usize = dims.next().unwrap().parse().unwrap();
        let h: usize = dims.next().unwrap().parse().unwrap();
        assert_eq!(lines.next().unwrap(), "255");
        (w, h, bytes[header_end..].to_vec())
    }

    #[test]
    fn ppm_round_trips_header_and_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8).collect();
        write_ppm(&path, 3, 2, &rgb).unwrap();
        let (w, h, payload) = read_ppm(&path);
        assert_eq!((w, h), (3, 2));
        assert_eq!(payload, rgb);
        assert!(write_ppm(&path, 4, 2, &rgb).is_err(), "length checked");
    }

    #[test]
    fn init_thresholds_reproduce_the_input_everywhere() {
        let (ckpt, image) = tiny_checkpoint();
        let dir = tempdir().unwrap();
        let paths = visualize_tokens(&ckpt, &image, dir.path()).unwrap();
        assert_eq!(paths.len(), 3, "input + one panel per block");
        let input = fs::read(&paths[0]).unwrap();
        for layer in &paths[1..] {
            assert_eq!(fs::read(layer).unwrap(), input, "{layer:?}");
        }
    }

    #[test]
    fn pruning_everything_blacks_out_every_panel() {
        let (mut ckpt, image) = tiny_checkpoint();
        for l in 0..ckpt.config.blocks {
            ckpt.thresholds.theta_prune[l] = 10.0;
        }
        let dir = tempdir().unwrap();
        let paths = visualize_tokens(&ckpt, &image, dir.path()).unwrap();
        for layer in &paths[1..] {
            let (_, _, payload) = read_ppm(layer);
            assert!(payload.iter().all(|&b| b == 0), "{layer:?}");
        }
    }

    #[test]
    fn merge_groups_share_their_destination_color() {
        let (mut ckpt, image) = tiny_checkpoint();
        ckpt.config.reduction_order = ReductionOrder::TopkMerge;
        ckpt.config.topk_k = 3;
        let fwd = model_forward(
            &image,
            &ckpt.config,
            &ckpt.params,
            &ckpt.thresholds,
            ExecMode::Inference,
            MaskMode::Hard,
            TrainableSet::Frozen,
        )
        .unwrap();
        let layer = &fwd.trace.layers[0];
        assert_eq!(layer.merge_assignments.len(), 3);
        let rgb = image_to_rgb(&image);
        let panel = render_layer(&rgb, layer, &ckpt.config);
        for &(src, dest) in &layer.merge_assignments {
            let color = group_color(dest);
            for token in [src, dest] {
                let p = token - 1;
                let ps = ckpt.config.patch_size;
                let per_row = ckpt.config.image_size / ps;
                let at = ((p / per_row) * ps * ckpt.config.image_size + (p % per_row) * ps) * 3;
                assert_eq!(&panel[at..at + 3], &color, "token {token} -> {dest}");
            }
        }
    }

    #[test]
    fn panels_are_deterministic_across_runs() {
        let (mut ckpt, image) = tiny_checkpoint();
        for l in 0..ckpt.config.blocks {
            ckpt.thresholds.theta_merge[l] = 0.5;
            ckpt.thresholds.theta_prune[l] = 0.05;
        }
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        let pa = visualize_tokens(&ckpt, &image, a.path()).unwrap();
        let pb = visualize_tokens(&ckpt, &image, b.path()).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        // Color assignment depends on nothing but the destination id.
        assert_eq!(group_color(9), group_color(9));
        assert_ne!(group_color(9), group_color(10));
    }

    #[test]
    fn rejects_mismatched_image() {
        let (ckpt, _) = tiny_checkpoint();
        let wrong = Tensor::zeros(&[8, 24]);
        assert!(matches!(
            visualize_tokens(&ckpt, &wrong, Path::new("/tmp")),
            Err(VizError::Dim(_))
        ));
    }
}
