//! Run configuration, training stages and checkpoints.

mod checkpoint;
mod config;
mod data;
mod model;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, SignalLayout, CHECKPOINT_VERSION};
pub use config::{Group, ModelConfig, RunConfig, ScheduleConfig, Stage};
pub use data::PairedSet;
pub use model::{Model, ModelDims};
pub use train::{
    diffusion_schedule, effective_bank, epoch_order, fit_alignment, fit_prior, model_dims,
    prior_eval_loss, prior_training_rows, train_alignment, train_prior, untrained_alignment,
    LossTrace, Plan, RunOutput, TraceRow, NOISE_STREAM,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databank::{generate_synthetic, Dataset, SynthSpec};
    use crate::error::Error;
    use crate::optim::AdamWConfig;

    fn tiny_data() -> Dataset {
        generate_synthetic(&SynthSpec {
            num_train_stimuli: 24,
            num_test_stimuli: 8,
            branch_dims: vec![6, 4, 16],
            latent_dim: 4,
            num_channels: 17,
            num_samples: 5,
            sample_rate_hz: 50.0,
            num_subjects: 1,
            repetitions: 2,
            ..SynthSpec::desk()
        })
        .unwrap()
    }

    fn tiny_cfg(stage: Stage) -> RunConfig {
        RunConfig {
            epochs: 3,
            batch_size: 8,
            warmup_steps: 2,
            model: ModelConfig {
                shared_dim: 8,
                fuse_hidden: 8,
                brain_hidden: 8,
                projector_hidden: 12,
                denoiser_width: 10,
            },
            ..RunConfig::desk(stage)
        }
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let out = train_alignment(&tiny_cfg(Stage::AlignRetrieval), &tiny_data(), None).unwrap();
        let bytes = out.checkpoint.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(out.trace.len(), 9);
        assert!(out.trace.rows.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn truncated_checkpoint_names_section() {
        let out = train_alignment(&tiny_cfg(Stage::AlignRetrieval), &tiny_data(), None).unwrap();
        let bytes = out.checkpoint.to_bytes();
        // cut into the last section (optim)
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 16]) {
            Err(Error::CorruptCheckpoint { section, .. }) => assert_eq!(section, "optim"),
            other => panic!("{other:?}"),
        }
        match Checkpoint::from_bytes(&bytes[..40]) {
            Err(Error::CorruptCheckpoint { section, .. }) => assert_eq!(section, "header"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_gate() {
        let out = train_alignment(&tiny_cfg(Stage::AlignRetrieval), &tiny_data(), None).unwrap();
        let mut bytes = out.checkpoint.to_bytes();
        let pos = bytes.iter().position(|&b| b == b'\n').unwrap();
        bytes[pos - 1] = b'9';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn mismatched_width_names_hvf() {
        let out = train_alignment(&tiny_cfg(Stage::AlignRetrieval), &tiny_data(), None).unwrap();
        let mut dims = out.checkpoint.meta.dims.clone();
        dims.model.shared_dim = 16;
        match out.checkpoint.model(&dims) {
            Err(Error::CheckpointShape { section, .. }) => assert_eq!(section, "hvf"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (a, b) = (
            train_alignment(&tiny_cfg(Stage::AlignRetrieval), &tiny_data(), None).unwrap(),
            train_alignment(&tiny_cfg(Stage::AlignRetrieval), &tiny_data(), None).unwrap(),
        );
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let c = train_alignment(
            &RunConfig {
                seed: 5,
                ..tiny_cfg(Stage::AlignRetrieval)
            },
            &tiny_data(),
            None,
        )
        .unwrap();
        assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
    }

    #[test]
    fn shuffles_are_seeded_permutations() {
        let a = epoch_order(3, 1, 50);
        assert_eq!(a, epoch_order(3, 1, 50));
        assert_ne!(a, epoch_order(3, 2, 50));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn resume_continues_schedule() {
        let data = tiny_data();
        let full = train_alignment(&tiny_cfg(Stage::AlignRetrieval), &data, None).unwrap();
        let short = train_alignment(
            &RunConfig {
                epochs: 1,
                ..tiny_cfg(Stage::AlignRetrieval)
            },
            &data,
            None,
        )
        .unwrap();
        // resume the three-epoch config from the one-epoch checkpoint
        let mut mid = short.checkpoint.clone();
        mid.meta.config = tiny_cfg(Stage::AlignRetrieval);
        let resumed = train_alignment(&tiny_cfg(Stage::AlignRetrieval), &data, Some(&mid)).unwrap();
        assert_eq!(resumed.trace.rows[0].step, 3);
        let plan = Plan::new(24, &tiny_cfg(Stage::AlignRetrieval)).unwrap();
        let sched = plan.schedule(&tiny_cfg(Stage::AlignRetrieval)).unwrap();
        assert_eq!(resumed.trace.rows[0].lr, sched.lr_at(3).unwrap());
        assert_eq!(resumed.checkpoint.step, full.checkpoint.step);
    }

    #[test]
    fn stage_two_needs_projector_and_keeps_visual_side() {
        let data = tiny_data();
        let plain = train_alignment(&tiny_cfg(Stage::AlignRetrieval), &data, None).unwrap();
        let err = train_alignment(
            &tiny_cfg(Stage::BrainFusionAlign),
            &data,
            Some(&plain.checkpoint),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::CheckpointShape { ref section, .. } if section == "projector")
        );

        let prior = train_prior(&tiny_cfg(Stage::PriorPretrain), &data.bank, None).unwrap();
        let stage2 = train_alignment(
            &tiny_cfg(Stage::BrainFusionAlign),
            &data,
            Some(&prior.checkpoint),
        )
        .unwrap();
        for g in [
            Group::Hvf,
            Group::Projector,
            Group::DenoiserAdapter,
            Group::DenoiserBackbone,
        ] {
            assert_eq!(
                stage2.model.group_checksum(g),
                prior.model.group_checksum(g),
                "{g:?}"
            );
        }
        assert_ne!(stage2.model.group_checksum(Group::Brain), 0);
    }

    #[test]
    fn prior_stage_keeps_backbone_fixed() {
        let data = tiny_data();
        let dims = model_dims(&tiny_cfg(Stage::PriorPretrain), &data.bank, None);
        let init = Model::init(&dims, 0, true);
        let out = train_prior(&tiny_cfg(Stage::PriorPretrain), &data.bank, None).unwrap();
        assert_eq!(
            out.model.group_checksum(Group::DenoiserBackbone),
            init.group_checksum(Group::DenoiserBackbone)
        );
        assert_ne!(
            out.model.group_checksum(Group::Hvf),
            init.group_checksum(Group::Hvf)
        );
        assert_ne!(
            out.model.group_checksum(Group::DenoiserAdapter),
            init.group_checksum(Group::DenoiserAdapter)
        );
    }

    #[test]
    fn diverging_run_reports_step() {
        let cfg = RunConfig {
            peak_lr: 1e300,
            optim: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..tiny_cfg(Stage::AlignRetrieval)
        };
        let r = train_alignment(&cfg, &tiny_data(), None);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }
}
