//! The full retrieval model: both encoders, one fusion network per
//! direction and the contrastive temperature, bundled with its config.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::config::RunConfig;
use crate::encoders::{
    encode_text, encode_video, init_text_params, init_video_params, EncodedText, EncodedVideo, TextSequence, VideoClip,
};
use crate::error::{Error, Result};
use crate::metrics::Direction;
use crate::numeric::{DenseArray, Group, ParameterSet, RngStream};
use crate::retrieval::{FusionNetwork, Gallery, GalleryEntry, Side};

/// Parameter holding `ln τ`.
pub const LOG_TAU: &str = "logit.log_tau";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParameterSet,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed).fork_str("init");
        let mut params = init_text_params(&config.model, root.fork_str("text"))?;
        params.extend(init_video_params(&config.model, root.fork_str("video"))?)?;
        for dir in [Direction::TextToVideo, Direction::VideoToText] {
            let net = fusion_network(config, dir);
            params.extend(net.init_params(root.fork_str(&net.prefix))?)?;
        }
        params.insert(LOG_TAU, DenseArray::scalar(config.train.temperature.ln()), Group::Base)?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Parameters read from a checkpoint; names and shapes must match a fresh
    /// model of `config`.
    pub fn from_checkpoint(config: &RunConfig, path: &Path) -> Result<Self> {
        let params = ParameterSet::read_checkpoint(BufReader::new(File::open(path)?))?;
        let fresh = Model::init(config)?;
        for (name, p) in fresh.params.iter() {
            let loaded = params
                .get(name)
                .map_err(|_| Error::input(format!("checkpoint lacks parameter `{name}`")))?;
            if loaded.shape() != p.value.shape() {
                return Err(Error::input(format!(
                    "checkpoint parameter `{name}` has shape {:?}, config expects {:?}",
                    loaded.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::input("checkpoint holds parameters this config does not define"));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.params.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn temperature(&self) -> Result<f64> {
        Ok(self.params.get(LOG_TAU)?.item().exp())
    }

    pub fn fusion(&self, direction: Direction) -> FusionNetwork {
        fusion_network(&self.config, direction)
    }

    pub fn encode_texts(&self, texts: &[TextSequence]) -> Result<Vec<EncodedText>> {
        texts.iter().map(|t| encode_text(&self.config.model, &self.params, t)).collect()
    }

    pub fn encode_videos(&self, videos: &[VideoClip]) -> Result<Vec<EncodedVideo>> {
        videos.iter().map(|v| encode_video(&self.config.model, &self.params, v)).collect()
    }
}

/// Fusion network for one retrieval direction: text queries over video
/// locals (`fusion_t2v`) or video queries over text locals (`fusion_v2t`).
pub fn fusion_network(config: &RunConfig, direction: Direction) -> FusionNetwork {
    let m = &config.model;
    FusionNetwork {
        prefix: match direction {
            Direction::TextToVideo => "fusion_t2v".into(),
            Direction::VideoToText => "fusion_v2t".into(),
        },
        width: m.width,
        focus_count: m.indicator_count - 1,
        k: m.k,
        blocks: m.fusion_blocks,
        hidden: m.mlp_hidden,
        activation: m.activation,
        gumbel_temp: m.gumbel_temp,
        add_stage1_scores: m.add_stage1_scores,
    }
}

/// Gallery of encoded videos, entry `i` carrying `ids[i]`.
pub fn video_gallery(videos: &[EncodedVideo], ids: &[u64]) -> Result<Gallery> {
    build_gallery(Side::Video, videos.iter().map(|v| (&v.global, &v.locals)), ids)
}

/// Gallery of encoded texts, entry `i` carrying `ids[i]`.
pub fn text_gallery(texts: &[EncodedText], ids: &[u64]) -> Result<Gallery> {
    build_gallery(Side::Text, texts.iter().map(|t| (&t.global, &t.locals)), ids)
}

fn build_gallery<'a>(
    side: Side,
    items: impl ExactSizeIterator<Item = (&'a Vec<f64>, &'a DenseArray)>,
    ids: &[u64],
) -> Result<Gallery> {
    if items.len() != ids.len() {
        return Err(Error::input(format!("{} items for {} ids", items.len(), ids.len())));
    }
    let entries = items
        .zip(ids)
        .map(|((g, l), &id)| GalleryEntry {
            id,
            global: g.clone(),
            locals: l.clone(),
        })
        .collect();
    Gallery::new(side, entries)
}
