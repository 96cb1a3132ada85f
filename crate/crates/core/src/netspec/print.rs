//! Canonical text form. Every printed spec parses back to an equal value.

use std::fmt;

use super::spec::{LayerSpec, NetSpec, ResidualBlock, TrainPolicy};
use super::BranchSpec;

fn write_layers(
    f: &mut fmt::Formatter<'_>,
    layers: &[LayerSpec],
    blocks: &[ResidualBlock],
) -> fmt::Result {
    let mut i = 0;
    while i < layers.len() {
        if let Some(b) = blocks.iter().find(|b| b.start == i && b.len > 0) {
            let body: Vec<String> = layers[b.start..b.start + b.len]
                .iter()
                .map(ToString::to_string)
                .collect();
            writeln!(f, "BLOCK{{ {} }}x1", body.join(" / "))?;
            i += b.len;
        } else {
            writeln!(f, "{}", layers[i])?;
            i += 1;
        }
    }
    Ok(())
}

impl fmt::Display for TrainPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("POLICY {")?;
        for (lr, epochs) in &self.schedule {
            write!(f, " lr={lr}:{epochs};")?;
        }
        write!(
            f,
            " momentum={}; decay={}; init={}; batch={}; mirror={}; ",
            self.momentum,
            self.weight_decay,
            self.init,
            self.batch_size,
            u8::from(self.mirror)
        )?;
        if let Some(c) = self.crop {
            write!(f, "crop={c}; ")?;
        }
        write!(f, "pad={} }}", self.pad)
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.name().is_empty() {
            writeln!(f, "NAME:{}", self.name())?;
        }
        let [c, h, w] = self.input_shape();
        writeln!(f, "INPUT:{c}x{h}x{w}")?;
        write_layers(f, self.layers(), self.blocks())?;
        writeln!(f, "{}", self.policy())
    }
}

impl fmt::Display for BranchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.name.is_empty() {
            writeln!(f, "NAME:{}", self.name)?;
        }
        write_layers(f, &self.layers, &self.blocks)?;
        if let Some(p) = &self.policy {
            writeln!(f, "{p}")?;
        }
        Ok(())
    }
}
