//! The complete network: extractor, cost volume, coupled aggregation and
//! disparity regression.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{Aggregation, AggregationConfig, AggregationOutput};
use crate::cost_volume::{build_cost_volume, GwcConfig, ImageStem};
use crate::error::{arg_err, shape_err, Result};
use crate::extractor::{Extractor, ExtractorConfig};
use crate::head::{regress_disparity, DisparityMap};
use crate::nn::{Builder, Mode, Session};
use crate::params::ParamStore;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of disparity bins at full resolution; predictions lie in `[0, D - 1]`.
    pub max_disparity: usize,
    /// Correlation groups, also the base aggregation width.
    pub groups: usize,
    pub extractor: ExtractorConfig,
    pub depth: usize,
    pub disparity_stride: usize,
    /// Group-wise correlation; when off the volume has a single channel.
    pub gwc: bool,
    /// Dilated branches at fusion sites; when off, plain 3×3 convolutions.
    pub atrous: bool,
    /// The 2D propagation pipeline and every fusion link.
    pub image_branch: bool,
    pub light_final: bool,
}

impl ModelConfig {
    /// Full-width network.
    pub fn standard() -> Self {
        ModelConfig {
            max_disparity: 192,
            groups: 8,
            extractor: ExtractorConfig::standard(),
            depth: 3,
            disparity_stride: 2,
            gwc: true,
            atrous: true,
            image_branch: true,
            light_final: true,
        }
    }

    /// Small network for 64×64 synthetic pairs.
    pub fn desk() -> Self {
        ModelConfig {
            max_disparity: 16,
            groups: 8,
            extractor: ExtractorConfig { stem: [8, 16, 16], encoder: vec![16, 24, 32], decoder: 32 },
            depth: 2,
            ..Self::standard()
        }
    }

    pub fn volume_channels(&self) -> usize {
        if self.gwc { self.groups } else { 1 }
    }

    pub fn gwc_config(&self) -> GwcConfig {
        GwcConfig { channels: self.extractor.decoder, groups: self.volume_channels(), max_disparity: self.max_disparity }
    }

    pub fn aggregation_config(&self) -> AggregationConfig {
        AggregationConfig {
            disparity_stride: self.disparity_stride,
            atrous: self.atrous,
            image_branch: self.image_branch,
            light_final: self.light_final,
            ..AggregationConfig::standard(self.depth, self.groups, self.volume_channels())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        GwcConfig { groups: self.groups, ..self.gwc_config() }.validate()?;
        self.aggregation_config().validate()
    }

    /// Smallest accepted image side.
    pub fn min_side(&self) -> usize {
        3 * (1 << self.extractor.depth())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub image_stem: Option<ImageStem>,
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub features: (Var, Var),
    /// `[N, groups, d0, h0, w0]`.
    pub cost_volume: Var,
    pub image_input: Option<Var>,
    pub aggregation: AggregationOutput,
    /// `[N, H, W]`.
    pub disparity: Var,
}

impl Model {
    /// Builds the model and a fresh parameter store initialized from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Model::new(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(store, &mut rng);
        let extractor = Extractor::new(&mut b.scope("extractor"), config.extractor.clone())?;
        let image_stem = if config.image_branch { Some(ImageStem::new(&mut b.scope("image_stem"), config.groups)?) } else { None };
        let aggregation = Aggregation::new(&mut b.scope("aggregation"), config.aggregation_config())?;
        Ok(Model { config, extractor, image_stem, aggregation })
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let min = self.config.min_side();
        if height < min || width < min {
            return Err(arg_err!("image {width}x{height} is below the minimum {min}x{min}"));
        }
        Ok(())
    }

    /// `left`, `right`: `[N, 3, H, W]` in `[0, 1]`.
    pub fn forward(&self, s: &mut Session<'_>, left: Var, right: Var) -> Result<ModelOutput> {
        let ls = s.graph.shape(left).to_vec();
        if ls.len() != 4 || ls[1] != 3 || s.graph.shape(right) != ls.as_slice() {
            return Err(shape_err!("stereo pair must be two [N, 3, H, W] tensors, got {ls:?} and {:?}", s.graph.shape(right)));
        }
        self.check_input(ls[2], ls[3])?;
        let fl = self.extractor.forward(s, left, "extractor.left")?;
        let fr = self.extractor.forward(s, right, "extractor.right")?;
        let cost_volume = build_cost_volume(s, fl, fr, &self.config.gwc_config())?;
        s.record("cost_volume", cost_volume);
        let image_input = match &self.image_stem {
            Some(stem) => Some(stem.forward(s, left)?),
            None => None,
        };
        let aggregation = self.aggregation.forward(s, cost_volume, image_input)?;
        let disparity = regress_disparity(&mut s.graph, aggregation.volume, [self.config.max_disparity, ls[2], ls[3]])?;
        s.record("disparity", disparity);
        Ok(ModelOutput { features: (fl, fr), cost_volume, image_input, aggregation, disparity })
    }

    /// Inference on a batch of pairs with running statistics.
    pub fn predict(&self, store: &ParamStore, left: &Tensor, right: &Tensor) -> Result<Vec<DisparityMap>> {
        let mut s = Session::new(store, Mode::Eval);
        let l = s.input(left.clone());
        let r = s.input(right.clone());
        let out = self.forward(&mut s, l, r)?;
        let d = s.graph.value(out.disparity);
        let [n, h, w] = [d.shape()[0], d.shape()[1], d.shape()[2]];
        (0..n)
            .map(|i| DisparityMap::dense(w, h, d.data()[i * h * w..(i + 1) * h * w].to_vec()))
            .collect()
    }
}
