//! Config-driven run description: one structured file with nested
//! sections, every key overridable with `--set section.key=value`.
//! Unknown keys are rejected; all constituent invariants are validated
//! before any compute. All randomness flows from the single model seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{apply_preset_template, ConditionPair, GuidanceConfig, PromptRole};
use crate::model::{ModelConfig, StyleImage};

/// Preset used when the config names neither a preset condition nor a
/// template.
pub const DEFAULT_PRESET_TEMPLATE: &str =
    "studio product photo, consistent style, clean background, {prompt}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Share the initial noise across both batch slots (isolates
    /// guidance effects from noise effects).
    pub shared_init_noise: bool,
    /// Classifier-free guidance scale; disabled when absent.
    pub cfg_scale: Option<f32>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            shared_init_noise: true,
            cfg_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsSection {
    pub user_prompt: String,
    /// Explicit preset condition; wins over the template when both set.
    pub preset_condition: Option<String>,
    /// Template expanded with `{prompt}` when no explicit preset given.
    pub preset_template: Option<String>,
    /// Which prompt takes batch slot 0 (the KV source role).
    pub reference: PromptRole,
}

impl Default for PromptsSection {
    fn default() -> Self {
        PromptsSection {
            user_prompt: String::new(),
            preset_condition: None,
            preset_template: None,
            reference: PromptRole::Preset,
        }
    }
}

/// The whole run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// PPM (P6) style image; a constant mid-gray image is synthesized
    /// when absent.
    pub style_image: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub capture: bool,
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub guidance: GuidanceConfig,
    pub prompts: PromptsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            style_image: None,
            output_dir: PathBuf::from("runs"),
            capture: true,
            model: ModelConfig::default(),
            schedule: ScheduleSection::default(),
            sampler: SamplerSection::default(),
            guidance: GuidanceConfig::default(),
            prompts: PromptsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    /// Loads a config and applies `--set section.key=value` overrides on
    /// the raw table before deserializing, so overrides hit exactly the
    /// same validation as file contents.
    pub fn load_with_overrides(path: &Path, sets: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        for set in sets {
            apply_set(&mut table, set)?;
        }
        let value = toml::Value::Table(table);
        RunConfig::deserialize(value).map_err(|e| Error::config(e.to_string()))
    }

    /// Validates every section; error messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::config(format!("model: {e}")))?;
        crate::sampler::make_schedule(
            self.schedule.train_steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.inference_steps,
        )
        .map_err(|e| Error::config(format!("schedule: {e}")))?;
        self.guidance.validate()?;
        if let Some(scale) = self.sampler.cfg_scale {
            if !scale.is_finite() || scale < 0.0 {
                return Err(Error::config(format!(
                    "sampler.cfg_scale must be a finite non-negative number, got {scale}"
                )));
            }
        }
        if self.prompts.user_prompt.trim().is_empty() {
            return Err(Error::config("prompts.user_prompt must not be empty"));
        }
        Ok(())
    }

    /// The preset condition after template resolution.
    pub fn resolved_preset(&self) -> String {
        match (&self.prompts.preset_condition, &self.prompts.preset_template) {
            (Some(preset), _) => preset.clone(),
            (None, Some(template)) => apply_preset_template(template, &self.prompts.user_prompt),
            (None, None) => {
                apply_preset_template(DEFAULT_PRESET_TEMPLATE, &self.prompts.user_prompt)
            }
        }
    }

    /// Canonical form: templates expanded away. The echo, the run id and
    /// a re-run from the echo all agree on this form.
    pub fn resolved(&self) -> RunConfig {
        let mut out = self.clone();
        out.prompts.preset_condition = Some(self.resolved_preset());
        out.prompts.preset_template = None;
        out
    }

    /// Stable run id derived from the resolved config contents.
    pub fn run_id(&self) -> String {
        let text = self.echo_toml();
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("run-{h:016x}")
    }

    /// The resolved config serialized back to TOML.
    pub fn echo_toml(&self) -> String {
        toml::to_string_pretty(&self.resolved()).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone()
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        self.guidance.clone()
    }

    /// Loads (or synthesizes) the style image and assembles the prompt
    /// pair with its role assignment.
    pub fn condition_pair(&self) -> Result<ConditionPair> {
        let style = match &self.style_image {
            Some(path) => StyleImage::load_ppm(path)
                .map_err(|e| Error::input(format!("style_image {}: {e}", path.display())))?,
            None => StyleImage::constant(self.model.image_size, self.model.image_size, 0.5)?,
        };
        ConditionPair::new(
            &self.prompts.user_prompt,
            &self.resolved_preset(),
            style,
            self.prompts.reference,
        )
    }

    /// Pad-token prompt pair for the classifier-free hook.
    pub fn uncond_pair(&self) -> Result<ConditionPair> {
        let style = match &self.style_image {
            Some(path) => StyleImage::load_ppm(path)
                .map_err(|e| Error::input(format!("style_image {}: {e}", path.display())))?,
            None => StyleImage::constant(self.model.image_size, self.model.image_size, 0.5)?,
        };
        ConditionPair::new(
            crate::guidance::PAD_TOKEN,
            crate::guidance::PAD_TOKEN,
            style,
            self.prompts.reference,
        )
    }
}

/// Applies one `section.key=value` (or top-level `key=value`) override.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<()> {
    let (path, raw_value) = set
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set expects key=value, got `{set}`")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::config(format!("--set has an empty key in `{set}`")));
    }
    // Parse the value as a TOML literal; fall back to a plain string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw_value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw_value.trim().to_string()));

    let mut parts = path.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            break;
        }
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::config(format!("--set path `{path}` crosses a non-table key"))
            })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Branch;
    use crate::guidance::MaskMode;

    const MINIMAL: &str = r#"
[prompts]
user_prompt = "red sneaker on wood"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.model.seed, 0);
        assert_eq!(cfg.schedule.inference_steps, 20);
        assert!(!cfg.guidance.kv_share_enabled);
        assert!(cfg.sampler.shared_init_noise);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[model]\nseeed = 3\n");
        let err = RunConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("seeed"), "{err}");
        assert!(RunConfig::from_toml_str("nonsense_key = 1").is_err());
    }

    #[test]
    fn full_guidance_section_round_trips() {
        let text = r#"
style_image = "style.ppm"
output_dir = "out"
capture = false

[model]
seed = 9

[guidance]
kv_share_enabled = true
kv_source_index = 0
kv_target_indices = [1]
kv_branches = ["text", "self"]
mask_enabled = true
tau = 0.25
mask_mode = "renorm"
lambda_image = 0.5
active_steps = [2, 10]
active_layers = ["mid.xattn"]

[prompts]
user_prompt = "blue vase"
preset_condition = "studio photo of blue vase"
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert!(cfg.guidance.kv_share_enabled);
        assert_eq!(cfg.guidance.kv_branches, [Branch::Text, Branch::SelfAttn]);
        assert_eq!(cfg.guidance.tau, Some(0.25));
        assert_eq!(cfg.guidance.mask_mode, MaskMode::Renorm);
        assert_eq!(cfg.guidance.active_steps, Some((2, 10)));
        cfg.validate().unwrap();

        let echoed = cfg.echo_toml();
        let back = RunConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(back.resolved(), cfg.resolved());
        assert_eq!(back.run_id(), cfg.run_id());
    }

    #[test]
    fn validation_names_offending_field() {
        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.guidance.tau = Some(1.5);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("guidance.tau"), "{err}");

        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.prompts.user_prompt = "  ".into();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("prompts.user_prompt"), "{err}");
    }

    #[test]
    fn preset_template_resolution_order() {
        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert!(cfg.resolved_preset().contains("red sneaker on wood"));
        cfg.prompts.preset_template = Some("minimal {prompt} shot".into());
        assert_eq!(cfg.resolved_preset(), "minimal red sneaker on wood shot");
        cfg.prompts.preset_condition = Some("explicit wins".into());
        assert_eq!(cfg.resolved_preset(), "explicit wins");
    }

    #[test]
    fn resolved_form_is_a_fixed_point() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        let once = cfg.resolved();
        assert_eq!(once, once.resolved());
        assert_eq!(cfg.run_id(), once.run_id());
    }

    #[test]
    fn set_overrides_reach_nested_keys() {
        let mut table: toml::Table = toml::from_str(MINIMAL).unwrap();
        apply_set(&mut table, "model.seed=42").unwrap();
        apply_set(&mut table, "guidance.tau=0.3").unwrap();
        apply_set(&mut table, "guidance.kv_branches=[\"text\"]").unwrap();
        apply_set(&mut table, "capture=false").unwrap();
        apply_set(&mut table, "prompts.user_prompt=white mug").unwrap();
        let cfg = RunConfig::deserialize(toml::Value::Table(table)).unwrap();
        assert_eq!(cfg.model.seed, 42);
        assert_eq!(cfg.guidance.tau, Some(0.3));
        assert_eq!(cfg.guidance.kv_branches, [Branch::Text]);
        assert!(!cfg.capture);
        assert_eq!(cfg.prompts.user_prompt, "white mug");
    }

    #[test]
    fn set_rejects_malformed_input() {
        let mut table = toml::Table::new();
        assert!(apply_set(&mut table, "no_equals").is_err());
        assert!(apply_set(&mut table, "=1").is_err());
    }

    #[test]
    fn run_id_changes_with_semantics() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.model.seed = 1;
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id(), a.clone().run_id());
    }
}
