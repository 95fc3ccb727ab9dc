//! Storage footprints and abstract energy estimates from operation counts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkSpec};
use crate::variant::ModelVariant;

/// Bits of a stored bias, batch-norm parameter or activation value.
pub const FLOAT_BITS: u64 = 32;

/// Energy coefficients per operation and per bit moved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub float_mult: f64,
    pub float_add: f64,
    pub int_add: f64,
    pub shift: f64,
    pub xnor: f64,
    pub compare: f64,
    pub memory_read_per_bit: f64,
    pub memory_write_per_bit: f64,
    pub leakage_per_cycle: f64,
    pub register_access_per_bit: f64,
    /// Fraction of dynamic logic energy attributed to switching; the rest is
    /// reported as internal. Without it the logic split is not reported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_share: Option<f64>,
    #[serde(default = "default_units")]
    pub units: String,
}

fn default_units() -> String {
    "arbitrary units".into()
}

impl Default for CostTable {
    /// Relative unit costs. They are not measurements of any process.
    fn default() -> Self {
        CostTable {
            float_mult: 3.7,
            float_add: 0.9,
            int_add: 0.1,
            shift: 0.05,
            xnor: 0.01,
            compare: 0.05,
            memory_read_per_bit: 0.05,
            memory_write_per_bit: 0.05,
            leakage_per_cycle: 0.01,
            register_access_per_bit: 0.005,
            switch_share: None,
            units: default_units(),
        }
    }
}

impl CostTable {
    pub fn zero() -> Self {
        CostTable {
            float_mult: 0.0,
            float_add: 0.0,
            int_add: 0.0,
            shift: 0.0,
            xnor: 0.0,
            compare: 0.0,
            memory_read_per_bit: 0.0,
            memory_write_per_bit: 0.0,
            leakage_per_cycle: 0.0,
            register_access_per_bit: 0.0,
            switch_share: None,
            units: default_units(),
        }
    }

    fn coefficients(&self) -> [(&'static str, f64); 10] {
        [
            ("float_mult", self.float_mult),
            ("float_add", self.float_add),
            ("int_add", self.int_add),
            ("shift", self.shift),
            ("xnor", self.xnor),
            ("compare", self.compare),
            ("memory_read_per_bit", self.memory_read_per_bit),
            ("memory_write_per_bit", self.memory_write_per_bit),
            ("leakage_per_cycle", self.leakage_per_cycle),
            ("register_access_per_bit", self.register_access_per_bit),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.coefficients() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("cost `{name}` must be finite and non-negative, got {v}")));
            }
        }
        if let Some(s) = self.switch_share {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("switch_share must lie in [0, 1], got {s}")));
            }
        }
        Ok(())
    }

    /// Every coefficient multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        CostTable {
            float_mult: self.float_mult * k,
            float_add: self.float_add * k,
            int_add: self.int_add * k,
            shift: self.shift * k,
            xnor: self.xnor * k,
            compare: self.compare * k,
            memory_read_per_bit: self.memory_read_per_bit * k,
            memory_write_per_bit: self.memory_write_per_bit * k,
            leakage_per_cycle: self.leakage_per_cycle * k,
            register_access_per_bit: self.register_access_per_bit * k,
            switch_share: self.switch_share,
            units: self.units.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: CostTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Arithmetic operation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ops {
    pub float_mult: u64,
    pub float_add: u64,
    pub int_add: u64,
    pub shift: u64,
    pub xnor: u64,
    pub compare: u64,
}

impl Ops {
    fn scaled(self, n: u64) -> Ops {
        Ops {
            float_mult: self.float_mult * n,
            float_add: self.float_add * n,
            int_add: self.int_add * n,
            shift: self.shift * n,
            xnor: self.xnor * n,
            compare: self.compare * n,
        }
    }

    fn add(&mut self, o: Ops) {
        self.float_mult += o.float_mult;
        self.float_add += o.float_add;
        self.int_add += o.int_add;
        self.shift += o.shift;
        self.xnor += o.xnor;
        self.compare += o.compare;
    }

    pub fn energy(&self, t: &CostTable) -> f64 {
        self.float_mult as f64 * t.float_mult
            + self.float_add as f64 * t.float_add
            + self.int_add as f64 * t.int_add
            + self.shift as f64 * t.shift
            + self.xnor as f64 * t.xnor
            + self.compare as f64 * t.compare
    }
}

/// Operations needed for one multiply-accumulate under `variant`.
pub fn mac_ops(variant: ModelVariant) -> Ops {
    let z = Ops::default();
    match variant {
        ModelVariant::Conventional => Ops { float_mult: 1, float_add: 1, ..z },
        ModelVariant::Lightnn2 => Ops { shift: 2, float_add: 2, ..z },
        ModelVariant::Lightnn1 => Ops { shift: 1, float_add: 1, ..z },
        ModelVariant::BinaryConnect => Ops { float_add: 1, ..z },
        ModelVariant::Lightnn2Bin => Ops { shift: 2, int_add: 2, ..z },
        ModelVariant::Lightnn1Bin => Ops { shift: 1, int_add: 1, ..z },
        ModelVariant::BinaryNet => Ops { xnor: 1, int_add: 1, ..z },
    }
}

/// Per-inference counts for one layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub name: String,
    pub macs: u64,
    pub ops: Ops,
    pub weight_bits_read: u64,
    pub param_bits_read: u64,
    pub activation_bits_read: u64,
    pub activation_bits_written: u64,
    pub register_bits: u64,
    pub storage_bits: u64,
    pub weight_storage_bits: u64,
    pub cycles: u64,
}

impl LayerCounts {
    fn memory_read_bits(&self) -> u64 {
        self.weight_bits_read + self.param_bits_read + self.activation_bits_read
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub variant: ModelVariant,
    pub network: String,
    pub layers: Vec<LayerCounts>,
}

impl OpCounts {
    pub fn total_ops(&self) -> Ops {
        let mut t = Ops::default();
        for l in &self.layers {
            t.add(l.ops);
        }
        t
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}

/// Weight-plus-bias storage of one layer in bits.
pub fn layer_storage_bits(layer: &LayerSpec, variant: ModelVariant) -> u64 {
    let (w, b) = layer.parameter_counts();
    w * variant.bits_per_weight() as u64 + b * FLOAT_BITS
}

/// Weight count times the variant's bits per weight, plus 32-bit biases.
pub fn storage_bits(net: &NetworkSpec, variant: ModelVariant) -> u64 {
    net.layers.iter().map(|l| layer_storage_bits(l, variant)).sum()
}

/// Weight storage alone, without biases.
pub fn weight_storage_bits(net: &NetworkSpec, variant: ModelVariant) -> u64 {
    net.weight_count() * variant.bits_per_weight() as u64
}

/// Counts the work of one inference. Weights are fetched on every use;
/// activations are written once and read once at 32 bits; every MAC touches
/// a 32-bit accumulator register.
pub fn count_ops(net: &NetworkSpec, variant: ModelVariant) -> Result<OpCounts> {
    let shapes = net.shapes()?;
    let bpw = variant.bits_per_weight() as u64;
    let per_mac = mac_ops(variant);
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let inputs: u64 = shapes[i].iter().product::<usize>() as u64;
        let outputs: u64 = shapes[i + 1].iter().product::<usize>() as u64;
        let mut c = LayerCounts {
            name: format!("{}:{}", i, layer_name(layer)),
            storage_bits: layer_storage_bits(layer, variant),
            weight_storage_bits: layer.parameter_counts().0 * bpw,
            ..Default::default()
        };
        let traffic = |c: &mut LayerCounts| {
            c.activation_bits_read = inputs * FLOAT_BITS;
            c.activation_bits_written = outputs * FLOAT_BITS;
        };
        match *layer {
            LayerSpec::Dense { inputs: n, outputs: m } => {
                c.macs = (n * m) as u64;
            }
            LayerSpec::Conv2D { in_ch, kh, kw, .. } => {
                c.macs = outputs * (in_ch * kh * kw) as u64;
            }
            LayerSpec::MaxPool { window, .. } => {
                c.ops.compare = outputs * (window * window).saturating_sub(1) as u64;
                c.cycles = outputs;
                traffic(&mut c);
            }
            LayerSpec::BatchNorm { features } => {
                // folded into one scale and one shift per element
                c.ops.float_mult = outputs;
                c.ops.float_add = outputs;
                c.param_bits_read = 2 * features as u64 * FLOAT_BITS;
                c.cycles = outputs;
                traffic(&mut c);
            }
            LayerSpec::Activation(_) => {
                c.ops.compare = outputs;
                c.cycles = outputs;
                traffic(&mut c);
            }
            LayerSpec::Dropout { .. } | LayerSpec::Flatten => {}
        }
        if layer.has_weights() {
            c.ops = per_mac.scaled(c.macs);
            // one bias add per output element
            c.ops.float_add += outputs;
            c.weight_bits_read = c.macs * bpw;
            c.param_bits_read = outputs * FLOAT_BITS;
            c.register_bits = c.macs * FLOAT_BITS;
            c.cycles = c.macs;
            traffic(&mut c);
        }
        layers.push(c);
    }
    Ok(OpCounts { variant, network: net.name.clone(), layers })
}

fn layer_name(layer: &LayerSpec) -> &'static str {
    match layer {
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::Conv2D { .. } => "conv",
        LayerSpec::MaxPool { .. } => "maxpool",
        LayerSpec::BatchNorm { .. } => "batchnorm",
        LayerSpec::Activation(_) => "activation",
        LayerSpec::Dropout { .. } => "dropout",
        LayerSpec::Flatten => "flatten",
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergySplit {
    pub memory: f64,
    pub logic: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogicSplit {
    pub leakage: f64,
    pub dynamic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_proxy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_proxy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub storage_bits: u64,
    pub macs: u64,
    pub ops: Ops,
    pub energy: EnergySplit,
    pub logic: LogicSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub network: String,
    pub units: String,
    pub storage_bits: u64,
    pub weight_storage_bits: u64,
    pub energy: EnergySplit,
    pub logic: LogicSplit,
    pub layers: Vec<LayerReport>,
}

fn layer_report(c: &LayerCounts, t: &CostTable) -> LayerReport {
    let memory = c.memory_read_bits() as f64 * t.memory_read_per_bit
        + c.activation_bits_written as f64 * t.memory_write_per_bit
        + c.register_bits as f64 * t.register_access_per_bit;
    let dynamic = c.ops.energy(t);
    let leakage = c.cycles as f64 * t.leakage_per_cycle;
    let logic = dynamic + leakage;
    LayerReport {
        name: c.name.clone(),
        storage_bits: c.storage_bits,
        macs: c.macs,
        ops: c.ops,
        energy: EnergySplit { memory, logic, total: memory + logic },
        logic: LogicSplit {
            leakage,
            dynamic,
            switch_proxy: t.switch_share.map(|s| dynamic * s),
            internal_proxy: t.switch_share.map(|s| dynamic * (1.0 - s)),
        },
    }
}

/// Linear combination of the counts with the table's coefficients.
pub fn estimate(counts: &OpCounts, table: &CostTable) -> Result<CostReport> {
    table.validate()?;
    let layers: Vec<LayerReport> = counts.layers.iter().map(|c| layer_report(c, table)).collect();
    let mut energy = EnergySplit::default();
    let mut logic = LogicSplit {
        switch_proxy: table.switch_share.map(|_| 0.0),
        internal_proxy: table.switch_share.map(|_| 0.0),
        ..Default::default()
    };
    for l in &layers {
        energy.memory += l.energy.memory;
        energy.logic += l.energy.logic;
        logic.leakage += l.logic.leakage;
        logic.dynamic += l.logic.dynamic;
        if let (Some(a), Some(b)) = (logic.switch_proxy.as_mut(), l.logic.switch_proxy) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (logic.internal_proxy.as_mut(), l.logic.internal_proxy) {
            *a += b;
        }
    }
    energy.total = energy.memory + energy.logic;
    Ok(CostReport {
        model: counts.variant.name().to_string(),
        network: counts.network.clone(),
        units: table.units.clone(),
        storage_bits: layers.iter().map(|l| l.storage_bits).sum(),
        weight_storage_bits: counts.layers.iter().map(|c| c.weight_storage_bits).sum(),
        energy,
        logic,
        layers,
    })
}

/// Counts and estimates in one step.
pub fn estimate_network(net: &NetworkSpec, variant: ModelVariant, table: &CostTable) -> Result<CostReport> {
    estimate(&count_ops(net, variant)?, table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::UnknownReportFormat(s.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

fn metric_rows(storage_bits: u64, e: &EnergySplit, l: &LogicSplit) -> Vec<(&'static str, f64)> {
    let mut rows = vec![
        ("storage_bits", storage_bits as f64),
        ("memory_energy", e.memory),
        ("logic_energy", e.logic),
        ("total_energy", e.total),
        ("leakage_energy", l.leakage),
        ("dynamic_energy", l.dynamic),
    ];
    if let (Some(s), Some(i)) = (l.switch_proxy, l.internal_proxy) {
        rows.push(("switch_energy", s));
        rows.push(("internal_energy", i));
    }
    rows
}

/// Renders a report. CSV has columns model,layer,metric,value with one row
/// per layer and metric, followed by the `total` rows.
pub fn emit_report(report: &CostReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["model", "layer", "metric", "value"])?;
            let mut emit = |layer: &str, rows: Vec<(&'static str, f64)>| -> Result<()> {
                for (metric, value) in rows {
                    w.write_record([report.model.as_str(), layer, metric, &value.to_string()])?;
                }
                Ok(())
            };
            for l in &report.layers {
                emit(&l.name, metric_rows(l.storage_bits, &l.energy, &l.logic))?;
            }
            emit("total", metric_rows(report.storage_bits, &report.energy, &report.logic))?;
            let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
        }
    }
}

pub fn parse_report_json(text: &str) -> Result<CostReport> {
    Ok(serde_json::from_str(text)?)
}

/// One row of the storage and energy comparison across variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantCost {
    pub variant: ModelVariant,
    pub storage_bits: u64,
    pub weight_storage_bits: u64,
    pub memory_energy: f64,
    pub logic_energy: f64,
    pub total_energy: f64,
}

/// Storage and energy of `net` for all seven variants in table order.
pub fn compare_variants(net: &NetworkSpec, table: &CostTable) -> Result<Vec<VariantCost>> {
    ModelVariant::ALL
        .iter()
        .map(|&v| {
            let r = estimate_network(net, v, table)?;
            Ok(VariantCost {
                variant: v,
                storage_bits: r.storage_bits,
                weight_storage_bits: r.weight_storage_bits,
                memory_energy: r.energy.memory,
                logic_energy: r.energy.logic,
                total_energy: r.energy.total,
            })
        })
        .collect()
}

/// `true` for each (error, energy) point that no other point beats on both
/// axes strictly.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(e, c)| !points.iter().any(|&(e2, c2)| e2 < e && c2 < c))
        .collect()
}
