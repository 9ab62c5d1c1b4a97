//! The assembled grounding model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_image, encode_text, FeaturePyramid, ImageEncoderParams, TextEncoderParams, TextFeatures, TokenSequence,
    TRUNK_STAGES,
};
use crate::error::{invalid, Result};
use crate::fusion::{fuse, ActivationParams, FiLMParams, MultiModalState};
use crate::graph::{Graph, Var};
use crate::head::{predict, AnchorSet, HeadParams};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::sog::{run_sog, EdgeStrategy, ForwardMode, NodeStrategy, SogDiagnostics, SogOutput, SogParams, SogSettings};
use crate::tensor::Tensor;

/// Architecture and graph hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    /// Width of the fused maps; the text width equals it.
    pub d_m: usize,
    pub trunk_channels: [usize; TRUNK_STAGES],
    pub head_hidden: usize,
    pub k: usize,
    pub dilations: Vec<usize>,
    pub edge: EdgeStrategy,
    pub node: NodeStrategy,
    pub sog_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            lstm_hidden: 48,
            d_m: 64,
            trunk_channels: [16, 24, 48, 64, 96],
            head_hidden: 48,
            k: 6,
            dilations: vec![1, 6, 12],
            edge: EdgeStrategy::default(),
            node: NodeStrategy::Knr,
            sog_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.lstm_hidden, self.d_m, self.head_hidden];
        if dims.contains(&0) || self.trunk_channels.contains(&0) {
            return Err(invalid!("model widths must be positive"));
        }
        if self.k == 0 {
            return Err(invalid!("k must be at least 1"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(invalid!("dilation rates must be a non-empty list of positive integers"));
        }
        self.edge.validate()
    }
}

/// Parameters and structure of the full pipeline.
#[derive(Clone, Debug)]
pub struct Grounder<F: Scalar> {
    pub config: ModelConfig,
    pub anchors: AnchorSet,
    pub store: ParamStore<F>,
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
    pub films: [FiLMParams; 3],
    pub activation: ActivationParams,
    /// Absent in the baseline configuration.
    pub sog: Option<SogParams>,
    pub head: HeadParams,
}

/// Handles into the graph produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<F> {
    pub text: TextFeatures,
    pub pyramid: FeaturePyramid,
    pub state: MultiModalState,
    pub sog: Option<SogOutput<F>>,
    pub preds: [Var; 3],
}

impl<F: Scalar> Grounder<F> {
    pub fn new<R: Rng>(config: ModelConfig, vocab_size: usize, anchors: AnchorSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        anchors.validate()?;
        if vocab_size == 0 {
            return Err(invalid!("vocabulary is empty"));
        }
        let mut store = ParamStore::new();
        let c = &config;
        let text = TextEncoderParams::init(&mut store, rng, vocab_size, c.embed_dim, c.lstm_hidden, c.d_m);
        let image = ImageEncoderParams::init(&mut store, rng, &c.trunk_channels, c.d_m);
        let films = [3, 4, 5].map(|l| FiLMParams::init(&mut store, rng, &format!("fusion.film{l}"), c.d_m, c.d_m));
        let activation = ActivationParams::init(&mut store, rng, c.d_m);
        let sog = c.sog_enabled.then(|| SogParams::init(&mut store, rng, &c.dilations, c.d_m, c.d_m));
        let head = HeadParams::init(&mut store, rng, c.d_m, c.head_hidden);
        Ok(Self { config, anchors, store, text, image, films, activation, sog, head })
    }

    pub fn vocab_size(&self) -> usize {
        self.text.vocab_size
    }

    pub fn sog_settings(&self) -> SogSettings {
        SogSettings {
            k: self.config.k,
            dilations: self.config.dilations.clone(),
            edge: self.config.edge,
            node: self.config.node,
        }
    }

    /// Build the forward graph. `rng` is consumed only by the edge strategy
    /// in training mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        image: &Tensor<F>,
        tokens: &TokenSequence,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<Forward<F>> {
        let text = encode_text(g, &self.store, &self.text, tokens)?;
        let pyramid = encode_image(g, &self.store, &self.image, image)?;
        let state = fuse(g, &self.store, &self.films, &self.activation, pyramid.levels, text.sentence)?;
        let (maps, sog) = match &self.sog {
            Some(p) => {
                let out = run_sog(g, &self.store, p, &self.sog_settings(), &state, &text, mode, rng)?;
                (out.maps, Some(out))
            }
            None => (state.maps, None),
        };
        let preds = predict(g, &self.store, &self.head, maps);
        Ok(Forward { text, pyramid, state, sog, preds })
    }

    pub fn diagnostics(&self, g: &Graph<F>, fwd: &Forward<F>) -> Option<SogDiagnostics> {
        fwd.sog.as_ref().map(|o| SogDiagnostics::from_output(g, o, &self.config.dilations))
    }
}
