//! Skill build: interaction model → bundle, both as plain functions and as
//! pipeline activities wired into recipes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::path::PathBuf;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{build_bloom_filter, extract_sentence_features, sequence_features, BloomFilter, DEFAULT_FPR};
use crate::frame::SemanticFrame;
use crate::grammar::{apply_max_entropy_priors, build_grammar_with_catalog, GrammarSample, WeightedGrammar};
use crate::interaction_model::{validate_interaction_model, BuiltinSlotTypes, InteractionModel, IntentSchema, SlotCatalog};
use crate::models::{
    train_crf, train_maxent_named, CrfModel, MaxEntModel, QuantizedCrf, QuantizedMaxEnt, TaggedSequence, TrainConfig,
};
use crate::pipeline::{
    ActivityContext, ActivityError, ActivityRegistry, ActivitySpec, ParamKind, ParamSpec, PipelineError, RecipeBuilder,
    RecipeDag,
};
use crate::runtime::{ModelStore, SkillModelBundle};

/// File name the build writes each packaged interaction model to.
pub const MODEL_PACKAGE: &str = "interaction_model.json";

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("interaction model is not buildable:\n{0}")]
    Invalid(String),
    #[error(transparent)]
    Grammar(#[from] crate::grammar::GrammarError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Runtime(#[from] crate::runtime::RuntimeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Grammar samples drawn per intent for statistical training.
    pub samples_per_intent: usize,
    pub bloom_fpr: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig { train: TrainConfig::default(), samples_per_intent: 100, bloom_fpr: DEFAULT_FPR }
    }
}

impl BuildConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn params() -> Vec<ParamSpec> {
        let d = BuildConfig::default();
        vec![
            ParamSpec::new("seed", ParamKind::Int).with_default(d.train.seed),
            ParamSpec::new("samples_per_intent", ParamKind::Int).with_default(d.samples_per_intent as u64),
            ParamSpec::new("epochs", ParamKind::Int).with_default(d.train.epochs as u64),
            ParamSpec::new("eta0", ParamKind::Float).with_default(d.train.eta0),
            ParamSpec::new("l1", ParamKind::Float).with_default(d.train.l1),
            ParamSpec::new("l2", ParamKind::Float).with_default(d.train.l2),
            ParamSpec::new("dropout", ParamKind::Float).with_default(d.train.dropout),
            ParamSpec::new("hash_bits", ParamKind::Int).with_default(d.train.hash_bits),
            ParamSpec::new("bloom_fpr", ParamKind::Float).with_default(d.bloom_fpr),
        ]
    }

    /// Recipe parameter values for this configuration.
    pub fn to_params(&self) -> BTreeMap<String, Value> {
        BTreeMap::from([
            ("seed".into(), json!(self.train.seed)),
            ("samples_per_intent".into(), json!(self.samples_per_intent)),
            ("epochs".into(), json!(self.train.epochs)),
            ("eta0".into(), json!(self.train.eta0)),
            ("l1".into(), json!(self.train.l1)),
            ("l2".into(), json!(self.train.l2)),
            ("dropout".into(), json!(self.train.dropout)),
            ("hash_bits".into(), json!(self.train.hash_bits)),
            ("bloom_fpr".into(), json!(self.bloom_fpr)),
        ])
    }

    fn from_ctx(ctx: &ActivityContext) -> Result<Self, ActivityError> {
        let mut c = BuildConfig::default();
        c.train.seed = ctx.param_i64("seed")? as u64;
        c.train.hash_seed = c.train.seed;
        c.samples_per_intent = ctx.param_i64("samples_per_intent")?.max(1) as usize;
        c.train.epochs = ctx.param_i64("epochs")? as _;
        c.train.eta0 = ctx.param_f64("eta0")?;
        c.train.l1 = ctx.param_f64("l1")?;
        c.train.l2 = ctx.param_f64("l2")?;
        c.train.dropout = ctx.param_f64("dropout")?;
        c.train.hash_bits = ctx.param_i64("hash_bits")? as u32;
        c.bloom_fpr = ctx.param_f64("bloom_fpr")?;
        Ok(c)
    }
}

/// Checks the model against the bundled builtin slot types.
pub fn validate_model(model: &InteractionModel) -> Result<(), BuildError> {
    let report = validate_interaction_model(model, &BuiltinSlotTypes::bundled());
    if report.is_buildable() {
        Ok(())
    } else {
        let lines: Vec<String> = report.violations.iter().map(|v| format!("  {v}")).collect();
        Err(BuildError::Invalid(lines.join("\n")))
    }
}

/// Slot type → values for every type the schema references.
pub fn slot_values(model: &InteractionModel) -> BTreeMap<String, Vec<String>> {
    let used: BTreeSet<&str> = model.schema.intents.iter().flat_map(|i| i.slots.iter().map(|s| s.slot_type.as_str())).collect();
    SlotCatalog::new(model, &BuiltinSlotTypes::bundled()).into_map().into_iter().filter(|(k, _)| used.contains(k.as_str())).collect()
}

pub fn compile_grammar(model: &InteractionModel) -> Result<WeightedGrammar, BuildError> {
    let catalog = SlotCatalog::new(model, &BuiltinSlotTypes::bundled());
    Ok(build_grammar_with_catalog(model, &catalog)?)
}

/// One bloom-filter gazetteer per referenced slot type, named after it.
pub fn build_gazetteers(model: &InteractionModel, fpr: f64) -> Result<Vec<BloomFilter>, BuildError> {
    slot_values(model)
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(name, values)| Ok(build_bloom_filter(name, values, fpr)?))
        .collect()
}

/// Slot names across all intents, first declaration order.
pub fn slot_names(schema: &IntentSchema) -> Vec<String> {
    let mut seen = BTreeSet::new();
    schema.intents.iter().flat_map(|i| &i.slots).filter(|s| seen.insert(s.name.clone())).map(|s| s.name.clone()).collect()
}

pub fn intent_dataset(samples: &[GrammarSample], gazetteers: &[BloomFilter]) -> Vec<(Vec<String>, String)> {
    samples.iter().map(|s| (extract_sentence_features(&s.tokens, gazetteers), s.frame.intent.clone())).collect()
}

pub fn slot_dataset(samples: &[GrammarSample], gazetteers: &[BloomFilter]) -> Vec<TaggedSequence> {
    samples
        .iter()
        .map(|s| TaggedSequence { features: sequence_features(&s.tokens, gazetteers), labels: s.bio_tags() })
        .collect()
}

pub fn train_intent_model(
    samples: &[GrammarSample],
    gazetteers: &[BloomFilter],
    config: &BuildConfig,
) -> Result<MaxEntModel, BuildError> {
    Ok(train_maxent_named(&intent_dataset(samples, gazetteers), &[], None, &config.train)?.0)
}

pub fn train_slot_model(
    samples: &[GrammarSample],
    gazetteers: &[BloomFilter],
    schema: &IntentSchema,
    config: &BuildConfig,
) -> Result<CrfModel, BuildError> {
    Ok(train_crf(&slot_dataset(samples, gazetteers), &slot_names(schema), None, &config.train)?.0)
}

pub fn training_samples(grammar: &WeightedGrammar, n_intents: usize, config: &BuildConfig) -> Result<Vec<GrammarSample>, BuildError> {
    Ok(grammar.sample_utterances(config.samples_per_intent * n_intents.max(1), config.train.seed)?)
}

/// Builds an unversioned bundle in-process, without the pipeline.
pub fn build_bundle(skill_id: &str, model: &InteractionModel, config: &BuildConfig) -> Result<SkillModelBundle, BuildError> {
    validate_model(model)?;
    let grammar = apply_max_entropy_priors(compile_grammar(model)?);
    let samples = training_samples(&grammar, model.schema.intents.len(), config)?;
    let gazetteers = build_gazetteers(model, config.bloom_fpr)?;
    let intent = train_intent_model(&samples, &gazetteers, config)?;
    let slots = train_slot_model(&samples, &gazetteers, &model.schema, config)?;
    Ok(assemble_bundle(skill_id, model, config, grammar, gazetteers, QuantizedMaxEnt::new(&intent), QuantizedCrf::new(&slots)))
}

pub fn assemble_bundle(
    skill_id: &str,
    model: &InteractionModel,
    config: &BuildConfig,
    grammar: WeightedGrammar,
    gazetteers: Vec<BloomFilter>,
    intent_model: QuantizedMaxEnt,
    slot_model: QuantizedCrf,
) -> SkillModelBundle {
    SkillModelBundle {
        skill_id: skill_id.to_string(),
        version: 0,
        model_digest: model.digest(),
        config_digest: config.digest(),
        schema: model.schema.clone(),
        invocation_name: model.invocation_name.clone(),
        slot_values: slot_values(model),
        grammar,
        intent_model,
        slot_model,
        gazetteers,
    }
}

pub fn encode_gazetteers(g: &[BloomFilter]) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u32::<LE>(g.len() as u32).expect("vec write");
    for f in g {
        let b = f.to_bytes();
        out.write_u64::<LE>(b.len() as u64).expect("vec write");
        out.extend_from_slice(&b);
    }
    out
}

pub fn decode_gazetteers(bytes: &[u8]) -> Result<Vec<BloomFilter>, ActivityError> {
    let mut r = Cursor::new(bytes);
    let n = r.read_u32::<LE>()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.read_u64::<LE>()? as usize;
        let start = r.position() as usize;
        let block = bytes.get(start..start + len).ok_or("truncated gazetteer block")?;
        out.push(BloomFilter::from_bytes(block)?);
        r.set_position((start + len) as u64);
    }
    Ok(out)
}

pub fn encode_samples(samples: &[GrammarSample]) -> String {
    samples.iter().map(|s| s.to_line() + "\n").collect()
}

/// Parses lines written by [`encode_samples`] (`Intent tokens\t{frame}`).
pub fn decode_samples(text: &str) -> Result<Vec<GrammarSample>, ActivityError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (head, frame) = line.split_once('\t').ok_or_else(|| format!("sample line {}: missing frame", i + 1))?;
            let frame: SemanticFrame = serde_json::from_str(frame)?;
            let tokens = head.split_whitespace().skip(1).map(str::to_string).collect();
            Ok(GrammarSample { tokens, frame })
        })
        .collect()
}

fn read_model(ctx: &ActivityContext, slot: &str) -> Result<InteractionModel, ActivityError> {
    Ok(serde_json::from_slice(&ctx.input(slot)?)?)
}

fn with_config(spec: ActivitySpec) -> ActivitySpec {
    BuildConfig::params().into_iter().fold(spec, ActivitySpec::param)
}

/// Registers the skill-build activities and the intent-classifier example.
pub fn register_build_activities(reg: &mut ActivityRegistry) -> Result<(), PipelineError> {
    reg.register(ActivitySpec::new("validate_model").input("model").output("validated"), |ctx| {
        let model = read_model(ctx, "model")?;
        validate_model(&model)?;
        ctx.log(format!("{} intents, {} samples", model.schema.intents.len(), model.samples.len()));
        ctx.write("validated", serde_json::to_vec(&model)?)
    })?;
    reg.register(ActivitySpec::new("compile_grammar").input("model").output("grammar"), |ctx| {
        let g = compile_grammar(&read_model(ctx, "model")?)?;
        ctx.log(format!("{} states, {} arcs", g.num_states(), g.num_arcs()));
        for w in g.warnings() {
            ctx.log(format!("warning: {w}"));
        }
        ctx.write("grammar", g.to_bytes())
    })?;
    reg.register(ActivitySpec::new("apply_priors").input("grammar").output("grammar"), |ctx| {
        let g = WeightedGrammar::from_bytes(&ctx.input("grammar")?)?;
        ctx.write("grammar", apply_max_entropy_priors(g).to_bytes())
    })?;
    reg.register(with_config(ActivitySpec::new("sample_data").input("grammar").output("samples")), |ctx| {
        let config = BuildConfig::from_ctx(ctx)?;
        let g = WeightedGrammar::from_bytes(&ctx.input("grammar")?)?;
        let samples = training_samples(&g, g.intents().len(), &config)?;
        ctx.log(format!("{} samples", samples.len()));
        ctx.write("samples", encode_samples(&samples))
    })?;
    reg.register(with_config(ActivitySpec::new("build_gazetteers").input("model").output("gazetteers")), |ctx| {
        let config = BuildConfig::from_ctx(ctx)?;
        let g = build_gazetteers(&read_model(ctx, "model")?, config.bloom_fpr)?;
        ctx.write("gazetteers", encode_gazetteers(&g))
    })?;
    reg.register(
        with_config(ActivitySpec::new("train_intent").input("samples").input("gazetteers").output("model")),
        |ctx| {
            let config = BuildConfig::from_ctx(ctx)?;
            let samples = decode_samples(&ctx.input_str("samples")?)?;
            let gaz = decode_gazetteers(&ctx.input("gazetteers")?)?;
            ctx.write("model", train_intent_model(&samples, &gaz, &config)?.to_bytes())
        },
    )?;
    reg.register(
        with_config(ActivitySpec::new("train_slots").input("samples").input("gazetteers").input("schema").output("model")),
        |ctx| {
            let config = BuildConfig::from_ctx(ctx)?;
            let samples = decode_samples(&ctx.input_str("samples")?)?;
            let gaz = decode_gazetteers(&ctx.input("gazetteers")?)?;
            let model = read_model(ctx, "schema")?;
            ctx.write("model", train_slot_model(&samples, &gaz, &model.schema, &config)?.to_bytes())
        },
    )?;
    reg.register(
        ActivitySpec::new("quantize")
            .input("intent_model")
            .input("slot_model")
            .output("intent_model")
            .output("slot_model"),
        |ctx| {
            let intent = MaxEntModel::from_bytes(&ctx.input("intent_model")?)?;
            let slots = CrfModel::from_bytes(&ctx.input("slot_model")?)?;
            let (qi, qs) = (QuantizedMaxEnt::new(&intent).to_bytes(), QuantizedCrf::new(&slots).to_bytes());
            ctx.log(format!(
                "intent {} -> {} bytes, slots {} -> {} bytes",
                ctx.input("intent_model")?.len(),
                qi.len(),
                ctx.input("slot_model")?.len(),
                qs.len()
            ));
            ctx.write("intent_model", qi)?;
            ctx.write("slot_model", qs)
        },
    )?;
    reg.register(
        with_config(
            ActivitySpec::new("assemble_bundle")
                .input("model")
                .input("grammar")
                .input("gazetteers")
                .input("intent_model")
                .input("slot_model")
                .output("bundle")
                .param(ParamSpec::new("skill", ParamKind::String)),
        ),
        |ctx| {
            let config = BuildConfig::from_ctx(ctx)?;
            let model = read_model(ctx, "model")?;
            let bundle = assemble_bundle(
                &ctx.param_str("skill")?,
                &model,
                &config,
                WeightedGrammar::from_bytes(&ctx.input("grammar")?)?,
                decode_gazetteers(&ctx.input("gazetteers")?)?,
                QuantizedMaxEnt::read(&mut Cursor::new(ctx.input("intent_model")?.as_slice()))?,
                QuantizedCrf::read(&mut Cursor::new(ctx.input("slot_model")?.as_slice()))?,
            );
            ctx.write("bundle", bundle.to_bytes())
        },
    )?;
    reg.register(
        ActivitySpec::new("store_bundle").input("bundle").output("receipt").param(ParamSpec::new("store", ParamKind::Path)),
        |ctx| {
            let bundle = SkillModelBundle::from_bytes(&ctx.input("bundle")?)?;
            let store = ModelStore::open(PathBuf::from(ctx.param_str("store")?));
            let version = store.store(&bundle)?;
            ctx.log(format!("stored {} v{version}", bundle.skill_id));
            let receipt = json!({"skill": bundle.skill_id, "version": version, "bundle_digest": bundle.digest()});
            ctx.write("receipt", serde_json::to_vec_pretty(&receipt)?)
        },
    )?;
    register_ic_activities(reg)
}

/// `Intent word word ...` per line, optionally followed by a tab and a frame.
fn parse_labeled_lines(text: &str) -> Vec<(String, Vec<String>)> {
    text.lines()
        .filter_map(|l| {
            let head = l.split('\t').next()?;
            let mut words = head.split_whitespace();
            let intent = words.next()?.to_string();
            Some((intent, crate::text::normalize_tokens(&words.collect::<Vec<_>>().join(" "))))
        })
        .collect()
}

fn register_ic_activities(reg: &mut ActivityRegistry) -> Result<(), PipelineError> {
    reg.register(ActivitySpec::new("extract_features").input("data").output("features"), |ctx| {
        let rows: Vec<(Vec<String>, String)> = parse_labeled_lines(&ctx.input_str("data")?)
            .into_iter()
            .map(|(intent, tokens)| (extract_sentence_features(&tokens, &[]), intent))
            .collect();
        ctx.log(format!("{} examples", rows.len()));
        ctx.write("features", serde_json::to_vec(&rows)?)
    })?;
    reg.register(with_config(ActivitySpec::new("train_classifier").input("features").output("model")), |ctx| {
        let config = BuildConfig::from_ctx(ctx)?;
        let rows: Vec<(Vec<String>, String)> = serde_json::from_slice(&ctx.input("features")?)?;
        let (model, report) = train_maxent_named(&rows, &[], None, &config.train)?;
        if let Some(obj) = report.objective.last() {
            ctx.log(format!("final objective {obj:.4}"));
        }
        ctx.write("model", QuantizedMaxEnt::new(&model).to_bytes())
    })?;
    Ok(())
}

pub fn build_registry() -> ActivityRegistry {
    let mut reg = ActivityRegistry::new();
    register_build_activities(&mut reg).expect("activity names are unique");
    reg
}

fn config_refs(mut node: crate::pipeline::NodeBuilder<'_>) -> crate::pipeline::NodeBuilder<'_> {
    for p in BuildConfig::params() {
        node = node.param(&p.name, format!("${{{}}}", p.name));
    }
    node
}

fn add_skill_nodes(b: &mut RecipeBuilder, prefix: &str, skill: &str, model_uri: &str) {
    let id = |s: &str| format!("{prefix}{s}");
    let art = |s: &str| format!("file://${{work}}/{skill}/{s}");
    b.node(&id("validate"), "validate_model").input("model", model_uri).output("validated", &art("validated.json"));
    let validated = art("validated.json");
    b.node(&id("grammar"), "compile_grammar").input("model", &validated).output("grammar", &art("grammar.fst"));
    b.node(&id("priors"), "apply_priors").input("grammar", &art("grammar.fst")).output("grammar", &art("grammar_priors.fst"));
    config_refs(b.node(&id("sample"), "sample_data").input("grammar", &art("grammar_priors.fst")).output("samples", &art("samples.tsv")));
    config_refs(b.node(&id("features"), "build_gazetteers").input("model", &validated).output("gazetteers", &art("gazetteers.bin")));
    config_refs(
        b.node(&id("train_intent"), "train_intent")
            .input("samples", &art("samples.tsv"))
            .input("gazetteers", &art("gazetteers.bin"))
            .output("model", &art("intent.model")),
    );
    config_refs(
        b.node(&id("train_slots"), "train_slots")
            .input("samples", &art("samples.tsv"))
            .input("gazetteers", &art("gazetteers.bin"))
            .input("schema", &validated)
            .output("model", &art("slots.model")),
    );
    b.node(&id("quantize"), "quantize")
        .input("intent_model", &art("intent.model"))
        .input("slot_model", &art("slots.model"))
        .output("intent_model", &art("intent.q8"))
        .output("slot_model", &art("slots.q8"));
    config_refs(
        b.node(&id("bundle"), "assemble_bundle")
            .input("model", &validated)
            .input("grammar", &art("grammar_priors.fst"))
            .input("gazetteers", &art("gazetteers.bin"))
            .input("intent_model", &art("intent.q8"))
            .input("slot_model", &art("slots.q8"))
            .output("bundle", &art("bundle.bin"))
            .param("skill", skill),
    );
    b.node(&id("store"), "store_bundle")
        .input("bundle", &art("bundle.bin"))
        .output("receipt", &art("receipt.json"))
        .param("store", "${store}");
    b.output(&art("bundle.bin"));
}

fn base_params(b: &mut RecipeBuilder) {
    b.param(ParamSpec::new("work", ParamKind::Path).with_default("work"));
    b.param(ParamSpec::new("store", ParamKind::Path).with_default("store"));
    for p in BuildConfig::params() {
        b.param(p);
    }
}

/// Build recipe for several skills at once. Each skill reads
/// `${work}/<skill>/interaction_model.json`; skills share no artifacts, so a
/// parallel executor builds them concurrently.
pub fn multi_skill_recipe(skills: &[String], registry: &ActivityRegistry) -> Result<RecipeDag, PipelineError> {
    let mut b = RecipeBuilder::new("build_skills");
    base_params(&mut b);
    for s in skills {
        add_skill_nodes(&mut b, &format!("{s}."), s, &format!("file://${{work}}/{s}/{MODEL_PACKAGE}"));
    }
    b.build(registry)
}

/// Parameterized single-skill recipe: `--model <package.json> --skill <id>`.
pub fn build_skill_recipe(registry: &ActivityRegistry) -> Result<RecipeDag, PipelineError> {
    let mut b = RecipeBuilder::new("build_skill");
    b.param(ParamSpec::new("model", ParamKind::Path));
    b.param(ParamSpec::new("skill", ParamKind::String));
    base_params(&mut b);
    add_skill_nodes(&mut b, "", "${skill}", "file://${model}");
    b.build(registry)
}

/// Intent-classifier recipe: extract_features → train_classifier.
pub fn build_ic_model_recipe(registry: &ActivityRegistry) -> Result<RecipeDag, PipelineError> {
    let mut b = RecipeBuilder::new("build_ic_model");
    b.param(ParamSpec::new("data_file", ParamKind::Path));
    b.param(ParamSpec::new("work", ParamKind::Path).with_default("work"));
    let cfg: Vec<ParamSpec> = BuildConfig::params();
    for p in cfg {
        b.param(p);
    }
    b.node("extract_features", "extract_features")
        .input("data", "file://${data_file}")
        .output("features", "file://${work}/ic/features.json");
    config_refs(
        b.node("train_classifier", "train_classifier")
            .input("features", "file://${work}/ic/features.json")
            .output("model", "file://${work}/ic/model.q8"),
    );
    b.build(registry)
}

/// Every recipe exposed on the command line.
pub fn standard_recipes(registry: &ActivityRegistry) -> Result<Vec<RecipeDag>, PipelineError> {
    Ok(vec![build_skill_recipe(registry)?, build_ic_model_recipe(registry)?])
}

/// Writes `model` to `<work>/<skill>/interaction_model.json`, where the
/// multi-skill recipe expects it.
pub fn package_model(model: &InteractionModel, work: &std::path::Path, skill: &str) -> std::io::Result<PathBuf> {
    let path = work.join(skill).join(MODEL_PACKAGE);
    crate::pipeline::write_atomic(&path, &serde_json::to_vec_pretty(model).expect("model serializes"))?;
    Ok(path)
}
