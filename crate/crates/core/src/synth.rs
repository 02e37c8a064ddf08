//! Deterministic synthetic C corpora: per-CWE vulnerable/fixed template
//! pairs, the 25 x (6 + 4) benchmark layout, and a tiny toy corpus.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Sample};
use crate::cwe::{CweId, CASTLE_CWES};
use crate::rng::{substream, Rng};

/// `(cwe, vulnerable, safe)`. Placeholders: `{f}` function, `{a}` `{b}`
/// variables, `{n}` a buffer size.
const TEMPLATES: &[(u32, &str, &str)] = &[
    (22,
     "FILE *{f}(const char *{a}) { char {b}[{n}]; snprintf({b}, sizeof {b}, \"/srv/%s\", {a}); return fopen({b}, \"r\"); }",
     "FILE *{f}(const char *{a}) { char {b}[{n}]; if (strstr({a}, \"..\") || strchr({a}, '/')) return NULL; snprintf({b}, sizeof {b}, \"/srv/%s\", {a}); return fopen({b}, \"r\"); }"),
    (78,
     "int {f}(const char *{a}) { char {b}[{n}]; snprintf({b}, sizeof {b}, \"ls %s\", {a}); return system({b}); }",
     "int {f}(const char *{a}) { for (size_t i = 0; {a}[i]; i++) if (!isalnum({a}[i])) return -1; char {b}[{n}]; snprintf({b}, sizeof {b}, \"ls %s\", {a}); return system({b}); }"),
    (89,
     "int {f}(sqlite3 *db, const char *{a}) { char {b}[{n}]; snprintf({b}, sizeof {b}, \"SELECT * FROM t WHERE k='%s'\", {a}); return sqlite3_exec(db, {b}, 0, 0, 0); }",
     "int {f}(sqlite3 *db, const char *{a}) { sqlite3_stmt *{b}; sqlite3_prepare_v2(db, \"SELECT * FROM t WHERE k=?\", -1, &{b}, 0); sqlite3_bind_text({b}, 1, {a}, -1, 0); int r = sqlite3_step({b}); sqlite3_finalize({b}); return r; }"),
    (125,
     "int {f}(int {a}) { int {b}[{n}] = {0}; return {b}[{a}]; }",
     "int {f}(int {a}) { int {b}[{n}] = {0}; if ({a} < 0 || {a} >= {n}) return -1; return {b}[{a}]; }"),
    (134,
     "void {f}(const char *{a}) { printf({a}); }",
     "void {f}(const char *{a}) { printf(\"%s\", {a}); }"),
    (190,
     "void *{f}(size_t {a}) { size_t {b} = {a} * {n}; return malloc({b}); }",
     "void *{f}(size_t {a}) { if ({a} > SIZE_MAX / {n}) return NULL; size_t {b} = {a} * {n}; return malloc({b}); }"),
    (253,
     "int {f}(const char *{a}) { FILE *{b} = fopen({a}, \"r\"); if ({b} < 0) return -1; fclose({b}); return 0; }",
     "int {f}(const char *{a}) { FILE *{b} = fopen({a}, \"r\"); if ({b} == NULL) return -1; fclose({b}); return 0; }"),
    (327,
     "unsigned {f}(const char *{a}) { unsigned {b} = 0; while (*{a}) {b} = {b} * 31 + *{a}++; return {b} ^ {n}; }",
     "int {f}(const unsigned char *{a}, unsigned char *{b}) { return sha256_digest({a}, {n}, {b}); }"),
    (362,
     "int {a}; void *{f}(void *{b}) { {a} = {a} + {n}; return {b}; }",
     "int {a}; pthread_mutex_t lock; void *{f}(void *{b}) { pthread_mutex_lock(&lock); {a} = {a} + {n}; pthread_mutex_unlock(&lock); return {b}; }"),
    (369,
     "int {f}(int {a}, int {b}) { return ({a} * {n}) / {b}; }",
     "int {f}(int {a}, int {b}) { if ({b} == 0) return 0; return ({a} * {n}) / {b}; }"),
    (401,
     "int {f}(int {a}) { char *{b} = malloc({n}); if ({b} == NULL) return -1; if ({a} > 0) return {a}; free({b}); return 0; }",
     "int {f}(int {a}) { char *{b} = malloc({n}); if ({b} == NULL) return -1; if ({a} > 0) { free({b}); return {a}; } free({b}); return 0; }"),
    (415,
     "void {f}(int {a}) { char *{b} = malloc({n}); if ({a}) free({b}); free({b}); }",
     "void {f}(int {a}) { char *{b} = malloc({n}); if ({a}) { free({b}); {b} = NULL; } free({b}); }"),
    (416,
     "int {f}(void) { int *{a} = malloc({n} * sizeof(int)); free({a}); return {a}[0]; }",
     "int {f}(void) { int *{a} = malloc({n} * sizeof(int)); int {b} = {a}[0] = 1; free({a}); return {b}; }"),
    (476,
     "int {f}(size_t {a}) { int *{b} = malloc({a}); {b}[0] = {n}; return {b}[0]; }",
     "int {f}(size_t {a}) { int *{b} = malloc({a}); if ({b} == NULL) return -1; {b}[0] = {n}; return {b}[0]; }"),
    (522,
     "void {f}(const char *{a}) { FILE *{b} = fopen(\"creds.txt\", \"w\"); fprintf({b}, \"%s\", {a}); fclose({b}); }",
     "void {f}(const char *{a}) { unsigned char {b}[{n}]; hash_password({a}, {b}); store_hash({b}); }"),
    (617,
     "int {f}(int {a}) { assert({a} < {n}); return {a}; }",
     "int {f}(int {a}) { if ({a} >= {n}) return -1; return {a}; }"),
    (628,
     "void {f}(char *{a}, const char *{b}) { strncpy({a}, {b}, {n}, 0); }",
     "void {f}(char *{a}, const char *{b}) { strncpy({a}, {b}, {n}); }"),
    (674,
     "int {f}(int {a}) { return {f}({a} + {n}); }",
     "int {f}(int {a}) { if ({a} <= 0) return 0; return {f}({a} - {n}); }"),
    (761,
     "void {f}(const char *{a}) { char *{b} = strdup({a}); while (*{b} == ' ') {b}++; free({b}); }",
     "void {f}(const char *{a}) { char *{b} = strdup({a}); char *p = {b}; while (*p == ' ') p++; free({b}); }"),
    (770,
     "void *{f}(size_t {a}) { return malloc({a}); }",
     "void *{f}(size_t {a}) { if ({a} > {n}) return NULL; return malloc({a}); }"),
    (787,
     "void {f}(const char *{a}) { char {b}[{n}]; strcpy({b}, {a}); puts({b}); }",
     "void {f}(const char *{a}) { char {b}[{n}]; strncpy({b}, {a}, sizeof {b} - 1); {b}[sizeof {b} - 1] = 0; puts({b}); }"),
    (798,
     "int {f}(const char *{a}) { const char *{b} = \"hunter{n}\"; return strcmp({a}, {b}) == 0; }",
     "int {f}(const char *{a}) { const char *{b} = getenv(\"APP_SECRET\"); return {b} && strcmp({a}, {b}) == 0; }"),
    (822,
     "int {f}(long {a}) { int *{b} = (int *){a}; return *{b} + {n}; }",
     "int {f}(long {a}) { int {b}[{n}] = {0}; return {b}[{a} % {n}]; }"),
    (835,
     "int {f}(int {a}) { int {b} = 0; while ({a} != {n}) { {b}++; } return {b}; }",
     "int {f}(int {a}) { int {b} = 0; while ({a} < {n}) { {a}++; {b}++; } return {b}; }"),
    (843,
     "struct s { int k; }; float {f}(void *{a}) { float *{b} = (float *){a}; return *{b} + {n}; }",
     "struct s { int k; }; int {f}(void *{a}) { struct s *{b} = (struct s *){a}; return {b}->k + {n}; }"),
];

const FUNCS: &[&str] = &["handle", "process", "parse_input", "load", "copy_name", "run_task", "read_cfg", "do_work"];
const VARS: &[&str] = &["input", "buf", "name", "data", "len", "count", "idx", "path", "msg", "value", "dst", "src"];

fn template(cwe: u32) -> Option<&'static (u32, &'static str, &'static str)> {
    TEMPLATES.iter().find(|t| t.0 == cwe)
}

fn fill(t: &str, rng: &mut Rng) -> String {
    let f = *FUNCS.choose(rng).expect("non-empty");
    let mut vars = VARS.to_vec();
    vars.shuffle(rng);
    let n = [8, 16, 32, 64, 128].choose(rng).expect("non-empty").to_string();
    t.replace("{f}", f)
        .replace("{a}", vars[0])
        .replace("{b}", vars[1])
        .replace("{n}", &n)
        .replace("{0}", "{ 0 }")
}

/// One vulnerable or fixed sample for `cwe`.
pub fn sample_for(cwe: CweId, label: Label, id: String, rng: &mut Rng) -> Option<Sample> {
    let (_, vul, safe) = template(cwe.0)?;
    let code = fill(if label.is_vulnerable() { vul } else { safe }, rng);
    Some(Sample {
        id,
        code,
        label,
        cwe: Some(cwe),
        source: "synthetic".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    /// Per-CWE vulnerable/fixed C function pairs.
    Cwe,
    /// Very short token sequences for the tiny preset.
    Toy,
    /// 25 CWEs x (6 vulnerable + 4 safe), ignoring `num_samples`.
    Benchmark,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_samples: usize,
    #[serde(default = "crate::cwe::castle_classes")]
    pub cwes: Vec<CweId>,
    #[serde(default = "half")]
    pub vulnerable_fraction: f64,
    pub family: TemplateFamily,
    pub seed: u64,
    #[serde(default)]
    pub id_prefix: String,
}

fn half() -> f64 {
    0.5
}

pub fn generate(spec: &SyntheticCorpusSpec) -> Result<Vec<Sample>, String> {
    if !(0.0..=1.0).contains(&spec.vulnerable_fraction) {
        return Err(format!("vulnerable_fraction {} outside [0, 1]", spec.vulnerable_fraction));
    }
    if let Some(c) = spec.cwes.iter().find(|c| template(c.0).is_none()) {
        return Err(format!("no synthetic template for {c}"));
    }
    if spec.cwes.is_empty() && spec.family != TemplateFamily::Toy {
        return Err("cwes must not be empty".into());
    }
    let mut rng = substream(spec.seed, "synth");
    let out = match spec.family {
        TemplateFamily::Benchmark => benchmark_with(&spec.cwes, &spec.id_prefix, &mut rng),
        TemplateFamily::Toy => toy_with(spec.num_samples, spec.vulnerable_fraction, &spec.id_prefix, &mut rng),
        TemplateFamily::Cwe => {
            let n_vul = (spec.num_samples as f64 * spec.vulnerable_fraction).round() as usize;
            let mut labels: Vec<Label> = (0..spec.num_samples)
                .map(|i| if i < n_vul { Label::Vulnerable } else { Label::Safe })
                .collect();
            labels.shuffle(&mut rng);
            labels
                .into_iter()
                .enumerate()
                .map(|(i, label)| {
                    let cwe = spec.cwes[i % spec.cwes.len()];
                    sample_for(cwe, label, format!("{}{i:05}", spec.id_prefix), &mut rng).expect("checked")
                })
                .collect()
        }
    };
    Ok(out)
}

fn benchmark_with(cwes: &[CweId], prefix: &str, rng: &mut Rng) -> Vec<Sample> {
    let mut out = Vec::with_capacity(cwes.len() * 10);
    for &c in cwes {
        for k in 0..10 {
            let label = if k < 6 { Label::Vulnerable } else { Label::Safe };
            let id = format!("{prefix}{}-{k:02}", c);
            out.push(sample_for(c, label, id, rng).expect("checked"));
        }
    }
    out
}

/// Standard 250-sample benchmark layout over the 25 CWEs.
pub fn benchmark(seed: u64) -> Vec<Sample> {
    let cwes: Vec<CweId> = CASTLE_CWES.iter().map(|&n| CweId(n)).collect();
    benchmark_with(&cwes, "", &mut substream(seed, "synth"))
}

fn toy_with(n: usize, vul_fraction: f64, prefix: &str, rng: &mut Rng) -> Vec<Sample> {
    const FILLER: &[&str] = &["x = y ;", "y = 1 ;", "z = x + y ;", "n ++ ;", "k = n ;"];
    let n_vul = (n as f64 * vul_fraction).round() as usize;
    (0..n)
        .map(|i| {
            let vul = i < n_vul;
            let mut parts: Vec<&str> = (0..rng.random_range(0..2)).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
            let pos = rng.random_range(0..=parts.len());
            parts.insert(pos, if vul { "strcpy ( d , s ) ;" } else { "strncpy ( d , s , n ) ;" });
            Sample {
                id: format!("{prefix}toy{i:04}"),
                code: parts.join(" "),
                label: if vul { Label::Vulnerable } else { Label::Safe },
                cwe: Some(CweId(787)),
                source: "toy".into(),
            }
        })
        .collect()
}

/// Balanced toy corpus of short statements (vulnerable: `strcpy` call).
pub fn toy_corpus(n: usize, seed: u64) -> Vec<Sample> {
    toy_with(n, 0.5, "", &mut substream(seed, "synth"))
}
