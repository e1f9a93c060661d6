use std::collections::HashMap;

/// Smoothed inverse document frequency over the candidate sentences:
/// `ln((N + 1) / (df + 1)) + 1`.
fn idf_table(sentences: &[Vec<String>]) -> (HashMap<&str, f64>, f64) {
    let mut df: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        let mut seen: Vec<&str> = s.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = sentences.len() as f64;
    let idf = df
        .into_iter()
        .map(|(t, d)| (t, ((n + 1.0) / (d as f64 + 1.0)).ln() + 1.0))
        .collect();
    // idf of a term absent from every sentence
    (idf, (n + 1.0).ln() + 1.0)
}

fn weights<'a>(
    tokens: &'a [String],
    idf: &HashMap<&str, f64>,
    unseen: f64,
) -> HashMap<&'a str, f64> {
    let mut tf: HashMap<&str, f64> = HashMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_default() += 1.0;
    }
    tf.into_iter()
        .map(|(t, c)| (t, c * idf.get(t).copied().unwrap_or(unseen)))
        .collect()
}

fn cosine(a: &HashMap<&str, f64>, b: &HashMap<&str, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(t, w)| b.get(t).map(|v| w * v))
        .sum();
    let na = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// TF-IDF cosine similarity of `query` against every sentence, in input order.
pub fn tfidf_scores(query: &[String], sentences: &[Vec<String>]) -> Vec<f64> {
    let (idf, unseen) = idf_table(sentences);
    let q = weights(query, &idf, unseen);
    sentences
        .iter()
        .map(|s| cosine(&q, &weights(s, &idf, unseen)))
        .collect()
}

/// Returns the `k` sentences most similar to `utterance`, best first. Equal
/// scores keep their original order.
pub fn select_knowledge(utterance: &[String], sentences: &[Vec<String>], k: usize) -> Vec<Vec<String>> {
    if sentences.is_empty() || k == 0 {
        return Vec::new();
    }
    let scores = tfidf_scores(utterance, sentences);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
        .into_iter()
        .take(k)
        .map(|i| sentences[i].clone())
        .collect()
}
