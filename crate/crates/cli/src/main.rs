use clap::Parser;
use gatnerf_cli::{
    cmd_eval, cmd_gradcheck, cmd_render, cmd_reenact, cmd_synth, cmd_train, exit_code_for,
    parse_delta_edits, resolve_config, threads_from, Cli, Command, GammaMode,
};
use gatnerf_core::error::Error as CoreError;
use gatnerf_core::field::Ablation;

fn run() -> Result<(), CoreError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { common, out, frames, size } => {
            let mut overrides = common.set.clone();
            if let Some(f) = frames {
                overrides.push(format!("synth.frames={f}"));
            }
            if let Some(s) = size {
                overrides.push(format!("synth.image_size={s}"));
            }
            if let Some(seed) = common.seed {
                overrides.push(format!("synth.seed={seed}"));
            }
            let cfg = resolve_config(&common.preset, common.config.as_deref(), &overrides)?;
            cmd_synth(&cfg, &out)
        }
        Command::Train { common, data, out, iters, no_gat, no_latent, resume, checkpoint_every } => {
            let mut overrides = common.set.clone();
            if let Some(n) = iters {
                overrides.push(format!("train.iterations={n}"));
            }
            if let Some(seed) = common.seed {
                overrides.push(format!("train.seed={seed}"));
            }
            let cfg = resolve_config(&common.preset, common.config.as_deref(), &overrides)?;
            if no_gat && no_latent {
                return Err(CoreError::Config("choose at most one ablation".into()));
            }
            let ablation = if no_gat {
                Ablation::NoGat
            } else if no_latent {
                Ablation::NoLatent
            } else {
                Ablation::Full
            };
            cmd_train(&cfg, &data, &out, ablation, resume.as_deref(), checkpoint_every).map(|_| ())
        }
        Command::Render {
            common,
            data,
            checkpoint,
            out,
            frames,
            split,
            novel_expression_frame,
            novel_pose_frame,
            delta_set,
            gamma,
        } => {
            let cfg = resolve_config(&common.preset, common.config.as_deref(), &common.set)?;
            let edits = delta_set.as_deref().map(parse_delta_edits).transpose()?.unwrap_or_default();
            let gamma_mode: GammaMode = gamma.parse().map_err(CoreError::Config)?;
            cmd_render(
                &cfg,
                &data,
                &checkpoint,
                &out,
                frames.as_deref(),
                &split,
                novel_expression_frame,
                novel_pose_frame,
                &edits,
                gamma_mode,
                threads_from(common.threads),
            )
            .map(|_| ())
        }
        Command::Reenact { common, data, checkpoint, driver, out, camera_frame } => {
            let cfg = resolve_config(&common.preset, common.config.as_deref(), &common.set)?;
            cmd_reenact(&cfg, &data, &checkpoint, &driver, &out, camera_frame, threads_from(common.threads))
                .map(|_| ())
        }
        Command::Eval { common, data, checkpoint, out, frames, split, compare } => {
            let cfg = resolve_config(&common.preset, common.config.as_deref(), &common.set)?;
            cmd_eval(
                &cfg,
                &data,
                &checkpoint,
                &out,
                frames.as_deref(),
                &split,
                &compare,
                threads_from(common.threads),
            )
            .map(|_| ())
        }
        Command::Gradcheck { common } => {
            let _ = resolve_config(&common.preset, common.config.as_deref(), &common.set)?;
            cmd_gradcheck(None).map(|_| ())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(exit_code_for(&e) as i32);
    }
}
