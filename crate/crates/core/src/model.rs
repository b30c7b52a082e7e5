//! The full model: two base encoders plus, per layer, a clip-level and a
//! video-level decomposition site.
//!
//! Per layer `l` and modality `m`, with unique stream `u^m` and shared
//! stream `s^m` (both equal to the embedded input before the first layer):
//!
//! ```text
//! z_u = MSA_l(u)      z_s = MSA_l(s)          (one tensor in layer 1)
//! clip site:   u' = sum_i w_u,i E_c,i(z_u) + z_u     s' = sum_i w_s,i E_c,i(z_s) + z_s
//! video site:  u'' = sum_i w_u,i E_v,i(u') + u'     s'' = sum_i w_s,i E_v,i(s') + s'
//! ```
//!
//! Router weights at a site come from the streams feeding it. After the last
//! layer the heads see `u^r`, `u^o` and the mean of `s^r` and `s^o`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{LossToggles, ModelConfig};
use crate::data::Batch;
use crate::decomposer::{DecomposerBank, Level};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::heads::{fuse_shared, Discriminator, StreamHeads};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore, Session};
use crate::router::{ClassWeightBank, Router, RouterWeights};
use crate::tensor::Matrix;
use crate::Modality;

/// One decomposition site (a layer at one level).
#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    pub layer: usize,
    pub level: Level,
    pub bank: DecomposerBank,
    pub router: Router,
}

impl Site {
    pub fn name(&self) -> String {
        format!("l{}.{}", self.layer + 1, self.level.as_str())
    }
}

/// What a forward pass recorded at one site.
#[derive(Clone, Debug)]
pub struct SiteTrace {
    pub weights: RouterWeights,
    /// Decomposer outputs per stream set, `[modality][i]`. One set where the
    /// unique and shared inputs coincide, two otherwise.
    pub outputs: Vec<[Vec<Var>; 2]>,
}

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    /// rgb-unique, flow-unique, fused shared; each `(B*T) x d`.
    pub streams: [Var; 3],
    pub logits: [Var; 3],
    /// In [`McLrd::sites`] order.
    pub sites: Vec<SiteTrace>,
}

/// Training progress recorded alongside the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ModelState {
    pub pretrained: bool,
    /// Loss toggles of the adaptation run, if one has happened.
    pub adapted_with: Option<LossToggles>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McLrd {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoders: [Encoder; 2],
    /// Per-modality linear heads used only while training the encoders.
    pub pretrain_heads: [Linear; 2],
    /// Layer-major: clip then video for each layer.
    pub sites: Vec<Site>,
    pub heads: StreamHeads,
    pub discriminators: [Discriminator; 3],
    /// One per site, same order as `sites`.
    pub class_banks: Vec<ClassWeightBank>,
    pub state: ModelState,
    /// Generator state after the last construction or training stage.
    pub rng: ChaCha8Rng,
}

impl McLrd {
    /// Builds every parameter from `seed`, in a fixed order.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std = cfg.init_std;
        let encoders = Modality::ALL.map(|m| Encoder::new(&mut store, cfg, m, &mut rng));
        let pretrain_heads = Modality::ALL
            .map(|m| Linear::new(&mut store, &format!("pretrain.{}", m.as_str()), cfg.d, cfg.classes, std, true, &mut rng));
        let mut sites = Vec::with_capacity(2 * cfg.layers);
        for layer in 0..cfg.layers {
            for (level, n, width) in [(Level::Clip, cfg.n_clip, cfg.d), (Level::Video, cfg.n_video, cfg.clips)] {
                let name = format!("l{}.{}", layer + 1, level.as_str());
                let bank =
                    DecomposerBank::new(&mut store, &format!("{name}.dec"), level, n, cfg.rank, width, std, &mut rng)?;
                let router = Router::new(&mut store, &format!("{name}.router"), cfg.d, n, std, &mut rng);
                sites.push(Site {
                    layer,
                    level,
                    bank,
                    router,
                });
            }
        }
        let heads = StreamHeads::new(&mut store, cfg.d, cfg.classes, std, &mut rng);
        let discriminators = ["rgb-unique", "flow-unique", "shared"]
            .map(|s| Discriminator::new(&mut store, &format!("disc.{s}"), cfg.d, cfg.disc_hidden, std, &mut rng));
        let class_banks = sites
            .iter()
            .map(|s| ClassWeightBank::new(cfg.classes, 3 * s.bank.n, 0.9, false))
            .collect();
        Ok(McLrd {
            cfg: cfg.clone(),
            store,
            encoders,
            pretrain_heads,
            sites,
            heads,
            discriminators,
            class_banks,
            state: ModelState::default(),
            rng,
        })
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoders.iter().flat_map(|e| e.ids()).collect()
    }

    pub fn pretrain_head_ids(&self) -> Vec<ParamId> {
        self.pretrain_heads.iter().flat_map(|h| h.ids()).collect()
    }

    /// Decomposers, routers, stream heads and discriminators.
    pub fn adaptation_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self
            .sites
            .iter()
            .flat_map(|s| s.bank.ids().into_iter().chain(s.router.ids()))
            .collect();
        v.extend(self.heads.ids());
        v.extend(self.discriminators.iter().flat_map(|d| d.ids()));
        v
    }

    /// Freezes the encoders and discards the pretraining heads from further
    /// training.
    pub fn freeze_base(&mut self) {
        for e in &self.encoders {
            e.freeze(&mut self.store);
        }
        for id in self.pretrain_head_ids() {
            self.store.set_trainable(id, false);
        }
        self.state.pretrained = true;
    }

    /// Resets the class banks for a new adaptation run.
    pub fn reset_class_banks(&mut self, momentum: f64, exact: bool) {
        for b in &mut self.class_banks {
            *b = ClassWeightBank::new(self.cfg.classes, b.width, momentum, exact);
        }
    }

    fn inputs(&self, s: &mut Session, batch: &Batch) -> Result<[Var; 2]> {
        if batch.clips != self.cfg.clips {
            return Err(Error::dim("model input", (batch.clips, 0), (self.cfg.clips, 0)));
        }
        Ok([s.tape.constant(batch.rgb.clone()), s.tape.constant(batch.flow.clone())])
    }

    /// Per-modality pretraining logits `B x C` from `TAP(f_L)`.
    pub fn forward_pretrain(&self, s: &mut Session, batch: &Batch) -> Result<[Var; 2]> {
        let x = self.inputs(s, batch)?;
        let mut logits = x;
        for m in Modality::ALL {
            let f = self.encoders[m.index()].forward(s, x[m.index()])?;
            let pooled = s.tape.segment_mean(f, self.cfg.clips)?;
            logits[m.index()] = self.pretrain_heads[m.index()].forward(s, pooled)?;
        }
        Ok(logits)
    }

    /// Runs one site. `unique` and `shared` are the per-modality input
    /// streams; pass the same vars twice for a single-stream site.
    pub fn site_forward(
        &self,
        s: &mut Session,
        site: &Site,
        unique: [Var; 2],
        shared: [Var; 2],
    ) -> Result<([Var; 2], [Var; 2], SiteTrace)> {
        let seg = self.cfg.clips;
        let single = unique == shared;
        let mut outputs: Vec<[Vec<Var>; 2]> = Vec::with_capacity(2);
        for streams in if single { vec![unique] } else { vec![unique, shared] } {
            let mut set: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
            for m in Modality::ALL {
                let z = streams[m.index()];
                let mlp = self.encoders[m.index()].mlp(s, site.layer, z)?;
                set[m.index()] = site.bank.decompose_all(s, z, mlp, m)?;
            }
            outputs.push(set);
        }
        let weights = site.router.route(s, unique, shared, seg)?;
        let shared_outputs = outputs.last().expect("at least one stream set");
        let mut u_out = unique;
        let mut s_out = shared;
        for m in Modality::ALL {
            let k = m.index();
            let u = s.tape.merge(&outputs[0][k], weights.unique[k], seg)?;
            u_out[k] = s.tape.add(u, unique[k])?;
            let sh = s.tape.merge(&shared_outputs[k], weights.shared, seg)?;
            s_out[k] = s.tape.add(sh, shared[k])?;
        }
        Ok((u_out, s_out, SiteTrace { weights, outputs }))
    }

    /// Decomposed forward pass with the stream heads.
    pub fn forward_adapt(&self, s: &mut Session, batch: &Batch) -> Result<AdaptOutput> {
        let x = self.inputs(s, batch)?;
        let mut f = x;
        for m in Modality::ALL {
            f[m.index()] = self.encoders[m.index()].embed(s, x[m.index()])?;
        }
        let (mut u, mut sh) = (f, f);
        let mut traces = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            let (uin, sin) = match site.level {
                Level::Clip => {
                    let mut zu = u;
                    let mut zs = sh;
                    for m in Modality::ALL {
                        let enc = &self.encoders[m.index()];
                        zu[m.index()] = enc.msa(s, site.layer, u[m.index()])?;
                        zs[m.index()] = if u == sh {
                            zu[m.index()]
                        } else {
                            enc.msa(s, site.layer, sh[m.index()])?
                        };
                    }
                    (zu, zs)
                }
                Level::Video => (u, sh),
            };
            let (nu, ns, trace) = self.site_forward(s, site, uin, sin)?;
            u = nu;
            sh = ns;
            traces.push(trace);
        }
        let fused = fuse_shared(&mut s.tape, sh[0], sh[1])?;
        let streams = [u[0], u[1], fused];
        let logits = self.heads.logits(s, streams, self.cfg.clips)?;
        Ok(AdaptOutput {
            streams,
            logits,
            sites: traces,
        })
    }

    /// Pooled `B x d` features of the three final streams, forward only.
    pub fn stream_features(&self, batch: &Batch) -> Result<[Matrix; 3]> {
        let mut s = Session::new(&self.store);
        let out = self.forward_adapt(&mut s, batch)?;
        let mut pooled = Vec::with_capacity(3);
        for v in out.streams {
            let p = s.tape.segment_mean(v, self.cfg.clips)?;
            pooled.push(s.tape.value(p).clone());
        }
        Ok(pooled.try_into().expect("three streams"))
    }

    /// Stream-head logits, forward only.
    pub fn adapted_logits(&self, batch: &Batch) -> Result<[Matrix; 3]> {
        let mut s = Session::new(&self.store);
        let out = self.forward_adapt(&mut s, batch)?;
        Ok(out.logits.map(|l| s.tape.value(l).clone()))
    }

    /// Pretraining-head logits, forward only.
    pub fn pretrain_logits(&self, batch: &Batch) -> Result<[Matrix; 2]> {
        let mut s = Session::new(&self.store);
        let out = self.forward_pretrain(&mut s, batch)?;
        Ok(out.map(|l| s.tape.value(l).clone()))
    }
}
