//! Parameter-sharing layer: one encoder definition, five dual-encoder
//! variants. Sharing is by storage aliasing — both towers resolve a shared
//! component to the same `shared/…` tensor, so training gradients from both
//! use sites accumulate into one buffer. Unshared components are duplicated
//! from one identical init, standing in for towers initialized from the same
//! pretrained weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::{
    encode_batch, init_tower_template, EncodedBatch, EncoderConfig, EncoderOutput, ParamSource,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, TensorId};

/// The five supported dual-encoder variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Siamese: every component shared.
    Sde,
    /// Asymmetric: nothing shared.
    Ade,
    /// Asymmetric with a shared token embedder.
    AdeSte,
    /// Asymmetric with a frozen token embedder.
    AdeFte,
    /// Asymmetric with a shared projection layer.
    AdeSpl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Sde,
        Variant::Ade,
        Variant::AdeSte,
        Variant::AdeFte,
        Variant::AdeSpl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Sde => "SDE",
            Variant::Ade => "ADE",
            Variant::AdeSte => "ADE-STE",
            Variant::AdeFte => "ADE-FTE",
            Variant::AdeSpl => "ADE-SPL",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SDE" => Ok(Variant::Sde),
            "ADE" => Ok(Variant::Ade),
            "ADE-STE" => Ok(Variant::AdeSte),
            "ADE-FTE" => Ok(Variant::AdeFte),
            "ADE-SPL" => Ok(Variant::AdeSpl),
            other => Err(Error::Config(format!(
                "unknown variant `{other}`; valid variants: SDE, ADE, ADE-STE, ADE-FTE, ADE-SPL"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative share/freeze flags for the three encoder components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharingSpec {
    pub share_token_embedder: bool,
    pub freeze_token_embedder: bool,
    pub share_encoder_body: bool,
    pub share_projection: bool,
}

impl SharingSpec {
    pub fn for_variant(variant: Variant) -> Self {
        let (ste, fte, body, spl) = match variant {
            Variant::Sde => (true, false, true, true),
            Variant::Ade => (false, false, false, false),
            Variant::AdeSte => (true, false, false, false),
            Variant::AdeFte => (false, true, false, false),
            Variant::AdeSpl => (false, false, false, true),
        };
        Self {
            share_token_embedder: ste,
            freeze_token_embedder: fte,
            share_encoder_body: body,
            share_projection: spl,
        }
    }

    /// The variant these flags encode, if they encode one at all.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| SharingSpec::for_variant(*v) == *self)
    }

    /// Only flag combinations naming one of the five variants are accepted;
    /// in particular a shared body without a shared token embedder has no
    /// defined semantics here.
    pub fn validate(&self) -> Result<()> {
        if self.share_encoder_body && !self.share_token_embedder {
            return Err(Error::Config(
                "share_encoder_body=true requires share_token_embedder=true".to_string(),
            ));
        }
        if self.variant().is_none() {
            return Err(Error::Config(format!(
                "flag combination (share_token_embedder={}, freeze_token_embedder={}, \
                 share_encoder_body={}, share_projection={}) does not name a supported variant",
                self.share_token_embedder,
                self.freeze_token_embedder,
                self.share_encoder_body,
                self.share_projection
            )));
        }
        Ok(())
    }
}

/// Which tower a forward pass runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Question,
    Answer,
}

impl Tower {
    fn prefix(&self) -> &'static str {
        match self {
            Tower::Question => "q",
            Tower::Answer => "a",
        }
    }
}

/// The encoder components a logical parameter name belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    TokenEmbedder,
    Body,
    Projection,
}

/// Classifies a logical parameter name. The token embedder is exactly the
/// vocabulary lookup table; position embeddings belong to the body.
pub fn component_of(logical: &str) -> Component {
    if logical == "embed/token" {
        Component::TokenEmbedder
    } else if logical.starts_with("proj/") {
        Component::Projection
    } else {
        Component::Body
    }
}

fn is_shared(spec: &SharingSpec, component: Component) -> bool {
    match component {
        // A frozen embedder is stored once: two frozen copies of the same
        // values would be indistinguishable.
        Component::TokenEmbedder => spec.share_token_embedder || spec.freeze_token_embedder,
        Component::Body => spec.share_encoder_body,
        Component::Projection => spec.share_projection,
    }
}

/// Maps a logical parameter name to its storage name for one tower.
pub fn resolve(spec: &SharingSpec, tower: Tower, logical: &str) -> String {
    if is_shared(spec, component_of(logical)) {
        format!("shared/{logical}")
    } else {
        format!("{}/{logical}", tower.prefix())
    }
}

/// A two-tower encoder with its sharing layout and parameter storage.
#[derive(Debug, Clone)]
pub struct DualEncoderModel {
    pub config: EncoderConfig,
    pub sharing: SharingSpec,
    pub params: ParamStore,
    /// Init-time snapshots of frozen tensors, kept for freeze verification.
    pub frozen_init: BTreeMap<String, Tensor>,
}

/// Builds a dual encoder: shared components stored once under `shared/`,
/// unshared components duplicated under `q/` and `a/` from the same
/// seed-derived init, frozen components marked untrainable and snapshotted.
pub fn build(config: &EncoderConfig, spec: SharingSpec, seed: u64) -> Result<DualEncoderModel> {
    spec.validate()?;
    let template = init_tower_template(config, seed)?;
    let mut params = ParamStore::new();
    let mut frozen_init = BTreeMap::new();
    for (logical, tensor) in template {
        let component = component_of(&logical);
        let trainable =
            !(component == Component::TokenEmbedder && spec.freeze_token_embedder);
        if is_shared(&spec, component) {
            let name = format!("shared/{logical}");
            if !trainable {
                frozen_init.insert(name.clone(), tensor.clone());
            }
            params.insert(name, tensor, trainable);
        } else {
            params.insert(format!("q/{logical}"), tensor.clone(), trainable);
            params.insert(format!("a/{logical}"), tensor, trainable);
        }
    }
    Ok(DualEncoderModel {
        config: config.clone(),
        sharing: spec,
        params,
        frozen_init,
    })
}

/// Binds one tower's view of the parameter store onto a tape.
pub struct TowerBinding<'a> {
    model: &'a DualEncoderModel,
    tower: Tower,
}

impl ParamSource for TowerBinding<'_> {
    fn bind(&self, tape: &mut Tape, logical: &str) -> Result<TensorId> {
        let storage = resolve(&self.model.sharing, self.tower, logical);
        let param = self.model.params.get(&storage)?;
        Ok(tape.bind_param(&storage, &param.value, param.trainable))
    }
}

impl DualEncoderModel {
    pub fn variant(&self) -> Variant {
        // The spec was validated at build time.
        self.sharing.variant().expect("validated sharing spec")
    }

    pub fn binding(&self, tower: Tower) -> TowerBinding<'_> {
        TowerBinding { model: self, tower }
    }

    /// Encodes a batch through one tower on an existing tape.
    pub fn encode_tower_batch(
        &self,
        tape: &mut Tape,
        tower: Tower,
        ids: &[usize],
        mask: &[f64],
        batch: usize,
    ) -> Result<EncodedBatch> {
        encode_batch(tape, &self.binding(tower), &self.config, ids, mask, batch)
    }

    fn encode_single(&self, tower: Tower, ids: &[usize], mask: &[f64]) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let out = self.encode_tower_batch(&mut tape, tower, ids, mask, 1)?;
        Ok(EncoderOutput {
            embedding: Tensor::vector(tape.value(out.embedding).data().to_vec()),
            pooled: Tensor::vector(tape.value(out.pooled).data().to_vec()),
        })
    }

    pub fn encode_question(&self, ids: &[usize], mask: &[f64]) -> Result<EncoderOutput> {
        self.encode_single(Tower::Question, ids, mask)
    }

    pub fn encode_answer(&self, ids: &[usize], mask: &[f64]) -> Result<EncoderOutput> {
        self.encode_single(Tower::Answer, ids, mask)
    }

    /// Logical parameter names of one tower (both towers use the same set).
    pub fn logical_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .names()
            .map(|n| {
                n.splitn(2, '/')
                    .nth(1)
                    .expect("storage names are namespaced")
                    .to_string()
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// SHA-256 over the canonical serialized form; identifies the exact
    /// parameter values an index or report was produced from.
    pub fn fingerprint(&self) -> String {
        let bytes = crate::checkpoint::to_bytes(self);
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

// ── Sharing verification ────────────────────────────────────────────────

/// One verified storage-level fact about the model.
#[derive(Debug, Clone)]
pub struct SharingCheck {
    pub tensor: String,
    pub kind: &'static str,
    pub detail: String,
}

/// Machine-readable result of [`assert_sharing`]; on success every check
/// passed and `violations` is zero.
#[derive(Debug, Clone)]
pub struct SharingReport {
    pub variant: String,
    pub checks: Vec<SharingCheck>,
    pub violations: usize,
}

impl SharingReport {
    /// `kind,tensor,detail` lines preceded by a summary header.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "variant={} checks={} violations={}\n",
            self.variant,
            self.checks.len(),
            self.violations
        ));
        for check in &self.checks {
            out.push_str(&format!(
                "{},{},{}\n",
                check.kind, check.tensor, check.detail
            ));
        }
        out
    }
}

/// Verifies storage-level sharing invariants: shared components stored
/// exactly once and resolved identically by both towers, unshared components
/// duplicated per tower, frozen tensors untrainable and bitwise equal to
/// their init snapshot. The first violation is an error naming the tensor.
pub fn assert_sharing(model: &DualEncoderModel) -> Result<SharingReport> {
    let spec = &model.sharing;
    spec.validate()?;
    let mut checks = Vec::new();
    for logical in model.logical_names() {
        let component = component_of(&logical);
        let q_name = resolve(spec, Tower::Question, &logical);
        let a_name = resolve(spec, Tower::Answer, &logical);
        if is_shared(spec, component) {
            if q_name != a_name {
                return Err(Error::InvariantViolation {
                    tensor: logical.clone(),
                    message: "shared component resolves to different storage per tower"
                        .to_string(),
                });
            }
            if !model.params.contains(&q_name) {
                return Err(Error::InvariantViolation {
                    tensor: q_name,
                    message: "shared storage missing".to_string(),
                });
            }
            for stale in [format!("q/{logical}"), format!("a/{logical}")] {
                if model.params.contains(&stale) {
                    return Err(Error::InvariantViolation {
                        tensor: stale,
                        message: "per-tower copy exists for a shared component".to_string(),
                    });
                }
            }
            checks.push(SharingCheck {
                tensor: logical.clone(),
                kind: "shared-alias",
                detail: format!("both towers -> {q_name}"),
            });
        } else {
            for name in [&q_name, &a_name] {
                if !model.params.contains(name) {
                    return Err(Error::InvariantViolation {
                        tensor: name.clone(),
                        message: "per-tower storage missing".to_string(),
                    });
                }
            }
            if model.params.contains(&format!("shared/{logical}")) {
                return Err(Error::InvariantViolation {
                    tensor: format!("shared/{logical}"),
                    message: "shared storage exists for an unshared component".to_string(),
                });
            }
            checks.push(SharingCheck {
                tensor: logical.clone(),
                kind: "per-tower",
                detail: format!("{q_name} / {a_name}"),
            });
        }
    }
    for (name, snapshot) in &model.frozen_init {
        let param = model.params.get(name)?;
        if param.trainable {
            return Err(Error::InvariantViolation {
                tensor: name.clone(),
                message: "frozen tensor is marked trainable".to_string(),
            });
        }
        if !param.value.bitwise_eq(snapshot) {
            return Err(Error::InvariantViolation {
                tensor: name.clone(),
                message: "frozen tensor drifted from its init snapshot".to_string(),
            });
        }
        checks.push(SharingCheck {
            tensor: name.clone(),
            kind: "frozen",
            detail: "bitwise equal to init snapshot".to_string(),
        });
    }
    Ok(SharingReport {
        variant: model.variant().name().to_string(),
        checks,
        violations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 4,
            d_embed: 8,
        }
    }

    #[test]
    fn variant_specs_satisfy_their_invariants() {
        for v in Variant::ALL {
            let spec = SharingSpec::for_variant(v);
            spec.validate().unwrap();
            assert_eq!(spec.variant(), Some(v));
        }
        // SDE <=> all share flags, freeze off.
        let sde = SharingSpec::for_variant(Variant::Sde);
        assert!(sde.share_token_embedder && sde.share_encoder_body && sde.share_projection);
        assert!(!sde.freeze_token_embedder);
        // ADE <=> all flags off.
        let ade = SharingSpec::for_variant(Variant::Ade);
        assert!(
            !ade.share_token_embedder
                && !ade.freeze_token_embedder
                && !ade.share_encoder_body
                && !ade.share_projection
        );
    }

    #[test]
    fn body_sharing_without_embedder_is_rejected() {
        let spec = SharingSpec {
            share_token_embedder: false,
            freeze_token_embedder: false,
            share_encoder_body: true,
            share_projection: true,
        };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("share_token_embedder"), "{err}");
    }

    #[test]
    fn non_variant_combination_is_rejected_naming_flags() {
        let spec = SharingSpec {
            share_token_embedder: true,
            freeze_token_embedder: true,
            share_encoder_body: false,
            share_projection: false,
        };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("freeze_token_embedder=true"), "{err}");
    }

    #[test]
    fn variant_parsing_accepts_the_five_names() {
        for (s, v) in [
            ("SDE", Variant::Sde),
            ("ade", Variant::Ade),
            ("ADE-STE", Variant::AdeSte),
            ("ade-fte", Variant::AdeFte),
            ("ADE-SPL", Variant::AdeSpl),
        ] {
            assert_eq!(s.parse::<Variant>().unwrap(), v);
        }
        assert!("BERT".parse::<Variant>().is_err());
    }

    #[test]
    fn sde_has_exactly_half_the_trainable_tensors_of_ade() {
        let cfg = tiny_config();
        let sde = build(&cfg, SharingSpec::for_variant(Variant::Sde), 1).unwrap();
        let ade = build(&cfg, SharingSpec::for_variant(Variant::Ade), 1).unwrap();
        assert_eq!(sde.params.trainable_count() * 2, ade.params.trainable_count());
    }

    #[test]
    fn ade_spl_shares_only_the_projection() {
        let cfg = tiny_config();
        let model = build(&cfg, SharingSpec::for_variant(Variant::AdeSpl), 1).unwrap();
        let shared: Vec<&String> = model
            .params
            .names()
            .filter(|n| n.starts_with("shared/"))
            .collect();
        assert_eq!(shared, vec!["shared/proj/b", "shared/proj/w"]);
    }

    #[test]
    fn ade_towers_start_bitwise_equal_but_stored_separately() {
        let cfg = tiny_config();
        let model = build(&cfg, SharingSpec::for_variant(Variant::Ade), 4).unwrap();
        for logical in model.logical_names() {
            let q = model.params.get(&format!("q/{logical}")).unwrap();
            let a = model.params.get(&format!("a/{logical}")).unwrap();
            assert!(q.value.bitwise_eq(&a.value), "{logical} differs at init");
        }
        assert!(!model.params.contains("shared/proj/w"));
    }

    #[test]
    fn ade_fte_freezes_one_shared_embedder_table() {
        let cfg = tiny_config();
        let model = build(&cfg, SharingSpec::for_variant(Variant::AdeFte), 4).unwrap();
        let p = model.params.get("shared/embed/token").unwrap();
        assert!(!p.trainable);
        assert!(model.frozen_init.contains_key("shared/embed/token"));
        // Everything else is per-tower and trainable.
        assert!(model.params.get("q/proj/w").unwrap().trainable);
    }

    #[test]
    fn sde_question_and_answer_encodes_are_identical() {
        let cfg = tiny_config();
        let model = build(&cfg, SharingSpec::for_variant(Variant::Sde), 2).unwrap();
        let ids = [3, 7, 0, 0];
        let mask = [1.0, 1.0, 0.0, 0.0];
        let q = model.encode_question(&ids, &mask).unwrap();
        let a = model.encode_answer(&ids, &mask).unwrap();
        assert!(q.embedding.bitwise_eq(&a.embedding));
        assert!(q.pooled.bitwise_eq(&a.pooled));
    }

    #[test]
    fn fresh_ade_towers_encode_identically() {
        let cfg = tiny_config();
        let model = build(&cfg, SharingSpec::for_variant(Variant::Ade), 2).unwrap();
        let ids = [3, 7, 12, 0];
        let mask = [1.0, 1.0, 1.0, 0.0];
        let q = model.encode_question(&ids, &mask).unwrap();
        let a = model.encode_answer(&ids, &mask).unwrap();
        assert!(q.embedding.bitwise_eq(&a.embedding));
    }

    #[test]
    fn sde_and_ade_forward_passes_match_before_training() {
        let cfg = tiny_config();
        let sde = build(&cfg, SharingSpec::for_variant(Variant::Sde), 6).unwrap();
        let ade = build(&cfg, SharingSpec::for_variant(Variant::Ade), 6).unwrap();
        let ids = [1, 9, 14, 2];
        let mask = [1.0, 1.0, 1.0, 1.0];
        let qs = sde.encode_question(&ids, &mask).unwrap();
        let qa = ade.encode_question(&ids, &mask).unwrap();
        assert!(qs.embedding.bitwise_eq(&qa.embedding));
    }

    #[test]
    fn assert_sharing_passes_on_fresh_models() {
        let cfg = tiny_config();
        for v in Variant::ALL {
            let model = build(&cfg, SharingSpec::for_variant(v), 3).unwrap();
            let report = assert_sharing(&model).unwrap();
            assert_eq!(report.violations, 0, "{v}");
            assert!(!report.checks.is_empty());
        }
    }

    #[test]
    fn assert_sharing_detects_frozen_drift() {
        let cfg = tiny_config();
        let mut model = build(&cfg, SharingSpec::for_variant(Variant::AdeFte), 3).unwrap();
        model
            .params
            .get_mut("shared/embed/token")
            .unwrap()
            .value
            .data_mut()[0] += 1.0;
        let err = assert_sharing(&model).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation { .. }));
        assert!(err.to_string().contains("shared/embed/token"), "{err}");
    }

    #[test]
    fn mutating_a_shared_tensor_is_seen_by_both_towers() {
        let cfg = tiny_config();
        let mut model = build(&cfg, SharingSpec::for_variant(Variant::Sde), 8).unwrap();
        let ids = [5, 11, 0, 0];
        let mask = [1.0, 1.0, 0.0, 0.0];
        let before_q = model.encode_question(&ids, &mask).unwrap();
        for v in model
            .params
            .get_mut("shared/proj/w")
            .unwrap()
            .value
            .data_mut()
        {
            *v *= 2.0;
        }
        let after_q = model.encode_question(&ids, &mask).unwrap();
        let after_a = model.encode_answer(&ids, &mask).unwrap();
        assert!(!before_q.embedding.bitwise_eq(&after_q.embedding));
        assert!(after_q.embedding.bitwise_eq(&after_a.embedding));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cfg = tiny_config();
        for v in [Variant::Sde, Variant::AdeFte, Variant::AdeSpl] {
            let model = build(&cfg, SharingSpec::for_variant(v), 5).unwrap();
            let bytes = crate::checkpoint::to_bytes(&model);
            let loaded = crate::checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(loaded.config, model.config);
            assert_eq!(loaded.sharing, model.sharing);
            assert_eq!(loaded.params.len(), model.params.len());
            for (name, p) in model.params.iter() {
                let lp = loaded.params.get(name).unwrap();
                assert_eq!(lp.trainable, p.trainable);
                assert!(lp.value.bitwise_eq(&p.value), "{name}");
            }
            for (name, t) in &model.frozen_init {
                assert!(loaded.frozen_init[name].bitwise_eq(t));
            }
            assert_eq!(crate::checkpoint::to_bytes(&loaded), bytes);
            assert_eq!(loaded.fingerprint(), model.fingerprint());
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(crate::checkpoint::from_bytes(b"not a checkpoint").is_err());
        let cfg = tiny_config();
        let model = build(&cfg, SharingSpec::for_variant(Variant::Sde), 5).unwrap();
        let mut bytes = crate::checkpoint::to_bytes(&model);
        bytes.truncate(bytes.len() - 3);
        assert!(crate::checkpoint::from_bytes(&bytes).is_err());
    }
}
