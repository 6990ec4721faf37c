// Temporary diagnostic for doc-QA retrieval misses. Deleted after use.
use mharag_core::data::generators::{gen_doc_qa, DocQaSpec};
use mharag_core::embedding::EmbedSpec;
use mharag_core::retrieval::{ExemplarStore, RetrievalMode};

#[test]
#[ignore]
fn classify_docqa_misses() {
    for seed in 0..4u64 {
        for dim in [128usize, 192, 256, 384] {
            let spec = DocQaSpec {
                seed,
                hit_floor_pct: 0.0, // disable retry loop, take attempt 0
                max_retries: 0,
                embed_spec: EmbedSpec {
                    dim,
                    ..EmbedSpec::default()
                },
                ..DocQaSpec::default()
            };
            let ds = match gen_doc_qa(&spec) {
                Ok(d) => d,
                Err(e) => {
                    println!("seed {seed} dim {dim}: gen failed: {e}");
                    continue;
                }
            };
            let store =
                ExemplarStore::build(&ds.train, RetrievalMode::Cosine, spec.embed_spec).unwrap();
            // Recover (entity, property, template-suffix) from the question text.
            let parts = |q: &str| -> (String, String, String) {
                let rest = &q[5..]; // skip the 4-char lead word and space
                let (entity, rest) = rest.split_at(10);
                let rest = rest.strip_prefix(" show ").unwrap();
                let prop_end = rest
                    .find(|c: char| !c.is_ascii_lowercase())
                    .unwrap_or(rest.len());
                let (prop, suffix) = rest.split_at(prop_end);
                (entity.to_string(), prop.to_string(), suffix.to_string())
            };
            let mut hits = 0usize;
            let mut same_entity = 0usize;
            let mut same_prop = 0usize;
            let mut same_suffix = 0usize;
            let mut same_plen = 0usize;
            let mut misses = 0usize;
            for ex in &ds.test {
                let got = store.top_k(&ex.question, 1, None).unwrap();
                let top = &store.resolve(&got.ids).unwrap()[0];
                let (qe, qp, qs) = parts(&ex.question);
                let (te, tp, ts) = parts(&top.question);
                if qe == te && qp == tp {
                    hits += 1;
                } else {
                    misses += 1;
                    if qe == te {
                        same_entity += 1;
                    }
                    if qp == tp {
                        same_prop += 1;
                    }
                    if qs == ts {
                        same_suffix += 1;
                    }
                    if qp.len() == tp.len() {
                        same_plen += 1;
                    }
                }
            }
            println!(
                "seed {seed} dim {dim}: hit {hits}/100, misses {misses} \
                 [same-entity {same_entity}, same-prop {same_prop}, \
                 same-suffix {same_suffix}, same-plen {same_plen}]"
            );
        }
    }
}
