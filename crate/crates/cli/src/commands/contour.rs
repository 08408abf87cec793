use std::io::Write;

use maskcond_core::{merge_contours, render, to_rgb};
use rayon::prelude::*;

use super::manifest;
use crate::{emit, CliError, CliResult, ContourArgs};

pub fn run(args: &ContourArgs, out: &mut dyn Write) -> CliResult<()> {
    let records = manifest(&args.manifest)?;
    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
        path: args.out.clone(),
        source,
    })?;
    records.par_iter().try_for_each(|rec| -> CliResult<()> {
        let gray = merge_contours(&rec.instruction);
        render::write_gray_contour(&gray, &args.out.join(format!("{}.png", rec.image_id)))?;
        render::write_contour_rgb(
            &to_rgb(&gray),
            &args.out.join(format!("{}_rgb.png", rec.image_id)),
        )?;
        Ok(())
    })?;
    emit(
        out,
        &format!(
            "wrote {} contour maps to {}\n",
            records.len(),
            args.out.display()
        ),
    )
}
