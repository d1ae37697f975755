//! Stage orchestration shared by the command line and the test suites.

use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gating::Router;
use crate::io::ModelState;
use crate::localize::{evaluate_localization, LocalizationReport};
use crate::render::{evaluate_rendering, gaussian_head, prepare_render_inputs, train_render_head, RenderReport};
use crate::splat::GaussianSplat;
use crate::trainer::{
    cluster_scene, encode_frames, init_models, joint_finetune, pretrain_experts, pretrain_gate, Stage, TrainLog,
};

/// Bytes per stored parameter in map-size accounting (float32 deployment).
pub const PARAM_BYTES: usize = 4;

fn map_frames(dataset: &Dataset) -> Result<Vec<usize>> {
    let map = dataset.map_indices();
    if map.is_empty() {
        return Err(Error::Empty("dataset has no mapping frames"));
    }
    Ok(map)
}

/// Expert cluster of every mapping frame, in `map_indices` order.
pub fn region_assignment(dataset: &Dataset, cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let map = map_frames(dataset)?;
    let poses: Vec<_> = map.iter().map(|&i| dataset.frames[i].pose).collect();
    cluster_scene(&poses, cfg.train.experts, cfg.train.seed)
}

/// Untrained models sized for `dataset`.
pub fn init_state(dataset: &Dataset, cfg: &PipelineConfig) -> Result<ModelState> {
    cfg.validate()?;
    let map = map_frames(dataset)?;
    let assignment = region_assignment(dataset, cfg)?;
    let (encoder, bank) = init_models(dataset, &map, &assignment, &cfg.train)?;
    let router = Router::new(
        &cfg.train.router,
        cfg.train.encoder.descriptor_dim,
        cfg.train.experts,
        cfg.train.seed,
    )?;
    Ok(ModelState {
        encoder,
        bank,
        router,
        head: None,
    })
}

/// Runs one training stage in place. On divergence the partially trained
/// state is left in `state` for inspection.
pub fn train_stage(
    stage: Stage,
    state: &mut ModelState,
    dataset: &Dataset,
    cfg: &PipelineConfig,
    log: &mut TrainLog,
) -> Result<serde_json::Value> {
    cfg.validate()?;
    let map = map_frames(dataset)?;
    let tc = &cfg.train;
    let summary = match stage {
        Stage::Init => serde_json::Value::Null,
        Stage::Experts => {
            let assignment = region_assignment(dataset, cfg)?;
            serde_json::to_value(pretrain_experts(
                dataset,
                &map,
                &assignment,
                tc,
                &mut state.encoder,
                &mut state.bank,
                log,
            )?)?
        }
        Stage::Gate => serde_json::to_value(pretrain_gate(
            dataset,
            &map,
            &state.encoder,
            &state.bank,
            &mut state.router,
            tc,
            log,
        )?)?,
        Stage::Joint => serde_json::to_value(joint_finetune(
            dataset,
            &map,
            &state.encoder,
            &mut state.bank,
            &mut state.router,
            tc,
            log,
        )?)?,
        Stage::Render => {
            let inputs = prepare_render_inputs(
                dataset,
                &map,
                &state.encoder,
                &state.router,
                &state.bank,
                cfg.render.coord_noise,
                cfg.render.seed,
            )?;
            let (head, report) = train_render_head(dataset, &inputs, &cfg.render, tc.optimizer, log)?;
            state.head = Some(head);
            serde_json::to_value(report)?
        }
    };
    Ok(summary)
}

/// Localizes every query frame.
pub fn localization_report(state: &ModelState, dataset: &Dataset, cfg: &PipelineConfig) -> Result<LocalizationReport> {
    let query = dataset.query_indices();
    if query.is_empty() {
        return Err(Error::Empty("dataset has no query frames"));
    }
    let fms = encode_frames(dataset, &query, &state.encoder)?;
    let features: Vec<_> = query
        .iter()
        .zip(fms)
        .map(|(&i, fm)| (i, fm, dataset.frames[i].intrinsics, dataset.frames[i].pose))
        .collect();
    evaluate_localization(
        &features,
        &state.router,
        &state.bank,
        &state.encoder,
        &cfg.pnp,
        None,
        cfg.train.seed,
        PARAM_BYTES,
    )
}

/// Renders `frames` (training views by default) from their own predicted
/// coordinates, corrupted exactly as during render training.
pub fn render_report(
    state: &ModelState,
    dataset: &Dataset,
    cfg: &PipelineConfig,
    frames: Option<&[usize]>,
) -> Result<RenderReport> {
    let head = state.head.as_ref().ok_or(Error::Empty("checkpoint has no render head"))?;
    let map;
    let frames = match frames {
        Some(f) => f,
        None => {
            map = map_frames(dataset)?;
            &map
        }
    };
    let inputs = prepare_render_inputs(
        dataset,
        frames,
        &state.encoder,
        &state.router,
        &state.bank,
        cfg.render.coord_noise,
        cfg.render.seed,
    )?;
    evaluate_rendering(dataset, head, &inputs, &cfg.render.raster)
}

/// The splats the head predicts for one frame (no coordinate noise).
pub fn frame_splats(state: &ModelState, dataset: &Dataset, frame: usize) -> Result<Vec<GaussianSplat>> {
    let head = state.head.as_ref().ok_or(Error::Empty("checkpoint has no render head"))?;
    let f = dataset
        .frames
        .get(frame)
        .ok_or_else(|| Error::invalid(format!("frame {frame} out of range for {} frames", dataset.len())))?;
    let inputs = prepare_render_inputs(dataset, &[frame], &state.encoder, &state.router, &state.bank, 0.0, 0)?;
    gaussian_head(head, &inputs[0].features, &inputs[0].coords.view(), &f.pose, &f.intrinsics)
}
