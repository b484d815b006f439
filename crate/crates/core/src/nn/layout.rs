use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    DenseKernel,
    DenseBias,
}

/// One contiguous block of the flat parameter vector.
///
/// Kernels are stored row-major with shape `(fan_out, fan_in)`: row `o` holds
/// the incoming weights of output unit `o`, column `i` the outgoing weights of
/// input unit `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Index of the dense layer this block belongs to.
    pub layer: usize,
}

impl LayerEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps flat parameter indices to layer roles for a dense feed-forward net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    widths: Vec<usize>,
    entries: Vec<LayerEntry>,
    total: usize,
}

/// Position of a flat index inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSite {
    pub entry: usize,
    pub layer: usize,
    pub kind: ParamKind,
    pub row: usize,
    pub col: usize,
}

impl LayerLayout {
    /// Layout for a dense net with the given layer widths, input first.
    pub fn for_widths(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be >= 1, got {widths:?}"
            )));
        }
        let mut entries = Vec::with_capacity(2 * (widths.len() - 1));
        let mut offset = 0;
        for (layer, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            entries.push(LayerEntry {
                name: format!("dense_{layer}/kernel"),
                kind: ParamKind::DenseKernel,
                shape: vec![fan_out, fan_in],
                offset,
                fan_in,
                fan_out,
                layer,
            });
            offset += fan_in * fan_out;
            entries.push(LayerEntry {
                name: format!("dense_{layer}/bias"),
                kind: ParamKind::DenseBias,
                shape: vec![fan_out],
                offset,
                fan_in,
                fan_out,
                layer,
            });
            offset += fan_out;
        }
        Ok(Self {
            widths: widths.to_vec(),
            entries,
            total: offset,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    /// Total parameter count K.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of dense layers (bias folded into its kernel).
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn layer_name(&self, layer: usize) -> String {
        format!("dense_{layer}")
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        let idx = name.strip_prefix("dense_")?.parse::<usize>().ok()?;
        (idx < self.num_layers()).then_some(idx)
    }

    pub fn kernel(&self, layer: usize) -> &LayerEntry {
        &self.entries[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &LayerEntry {
        &self.entries[2 * layer + 1]
    }

    /// Flat index range of a dense layer, kernel followed by bias.
    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        let k = self.kernel(layer);
        let b = self.bias(layer);
        k.offset..b.offset + b.len()
    }

    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        (0..self.num_layers()).map(|l| self.layer_range(l)).collect()
    }

    /// Dense layer owning each flat index.
    pub fn layer_of_each(&self) -> Vec<usize> {
        let mut out = vec![0; self.total];
        for (l, r) in self.layer_ranges().into_iter().enumerate() {
            out[r].fill(l);
        }
        out
    }

    pub fn locate(&self, index: usize) -> Result<ParamSite> {
        if index >= self.total {
            return Err(Error::Range {
                index,
                len: self.total,
            });
        }
        let entry = self
            .entries
            .partition_point(|e| e.offset + e.len() <= index);
        let e = &self.entries[entry];
        let local = index - e.offset;
        let (row, col) = match e.kind {
            ParamKind::DenseKernel => (local / e.fan_in, local % e.fan_in),
            ParamKind::DenseBias => (local, 0),
        };
        Ok(ParamSite {
            entry,
            layer: e.layer,
            kind: e.kind,
            row,
            col,
        })
    }

    /// Total number of output units over all layers.
    pub fn num_neurons(&self) -> usize {
        self.widths[1..].iter().sum()
    }

    /// Offset of each layer's first neuron in the global neuron numbering.
    pub fn neuron_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.widths[1..]
            .iter()
            .map(|w| {
                let o = acc;
                acc += w;
                o
            })
            .collect()
    }

    /// Global neuron (output unit) index for each flat parameter: a kernel
    /// weight belongs to the unit whose row it sits in, a bias to its unit.
    pub fn neuron_of_each(&self) -> Vec<usize> {
        let offsets = self.neuron_offsets();
        let mut out = vec![0; self.total];
        for l in 0..self.num_layers() {
            let k = self.kernel(l);
            for o in 0..k.fan_out {
                let start = k.offset + o * k.fan_in;
                out[start..start + k.fan_in].fill(offsets[l] + o);
            }
            let b = self.bias(l);
            for (o, slot) in out[b.range()].iter_mut().enumerate() {
                *slot = offsets[l] + o;
            }
        }
        out
    }
}
