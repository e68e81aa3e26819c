use proptest::prelude::*;

use pdpo::avsync::{from_stream_records, interleave, pool_observation, to_stream_records, AudioSegment, VisualFrameGroup};
use pdpo::grammar::DecodeMode;
use pdpo::objectives::{preference_loss, preference_prob};
use pdpo::pipeline::{best_of_n, majority_vote, ScoredSample};
use pdpo::policy::{Policy, PolicyConfig};
use pdpo::select::{select_top_steps, StepSusceptibility};
use pdpo::synthenv::{generate_episode, judge, reference_trace, EnvConfig};
use pdpo::trace::{Answer, ReasoningTrace, Step};
use pdpo::vocab::Vocabulary;

fn streams() -> impl Strategy<Value = (Vec<VisualFrameGroup>, Vec<AudioSegment>)> {
    let visual = prop::collection::vec((0.01f64..2.0, 1usize..4), 1..6).prop_map(|gaps| {
        let mut t = 0.0;
        let mut id = 0.0;
        gaps.into_iter()
            .map(|(gap, n)| {
                t += gap;
                let encodings = (0..n).map(|_| { id += 1.0; vec![id, -id] }).collect();
                VisualFrameGroup { timestamp: t, encodings }
            })
            .collect::<Vec<_>>()
    });
    let audio = prop::collection::vec((0.0f64..12.0, 0usize..3), 0..6).prop_map(|mut segs| {
        segs.sort_by(|a, b| a.0.total_cmp(&b.0));
        segs.into_iter()
            .enumerate()
            .map(|(j, (t, n))| AudioSegment {
                timestamp: t,
                encodings: (0..n).map(|k| vec![100.0 + j as f64, k as f64]).collect(),
            })
            .collect::<Vec<_>>()
    });
    (visual, audio)
}

fn sample(v: &Vocabulary, answer: Option<usize>, lp: f64) -> ScoredSample {
    let mut steps = vec![Step::hop(v, v.key(0), v.value(1))];
    if let Some(a) = answer {
        steps.push(Step::answer(v, v.value(a)));
    }
    ScoredSample {
        trace: ReasoningTrace::from_steps_lenient(v, "e", steps).unwrap(),
        log_prob: lp,
        correct: false,
    }
}

proptest! {
    #[test]
    fn fused_sequence_preserves_items_and_pool(s in streams()) {
        let (v, a) = s;
        let fused = interleave(&v, &a).unwrap();
        let all: Vec<Vec<f64>> = v.iter().flat_map(|g| g.encodings.clone())
            .chain(a.iter().flat_map(|s| s.encodings.clone())).collect();
        prop_assert_eq!(fused.len(), all.len());
        prop_assert!(fused.items.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let pooled = pool_observation(&fused).unwrap();
        for (d, p) in pooled.iter().enumerate() {
            let mean = all.iter().map(|e| e[d]).sum::<f64>() / all.len() as f64;
            prop_assert!((p - mean).abs() < 1e-9);
        }
        let (rv, ra) = from_stream_records(&to_stream_records(&v, &a));
        prop_assert_eq!(interleave(&rv, &ra).unwrap(), fused);
    }

    #[test]
    fn top_steps_dominate_the_rest(scores in prop::collection::vec(0.0f64..1.0, 1..12), t in 0usize..14) {
        let sus: Vec<_> = scores.iter().enumerate().map(|(i, &d)| StepSusceptibility { step: i + 1, d }).collect();
        let picked = select_top_steps(&sus, t);
        prop_assert_eq!(picked.len(), t.min(sus.len()));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        let worst_picked = picked.iter().map(|&k| scores[k - 1]).fold(f64::INFINITY, f64::min);
        for s in sus.iter().filter(|s| !picked.contains(&s.step)) {
            prop_assert!(s.d <= worst_picked);
        }
    }

    #[test]
    fn majority_vote_returns_a_modal_answer(
        answers in prop::collection::vec(prop::option::of(0usize..3), 1..10),
        lps in prop::collection::vec(-5.0f64..0.0, 10),
    ) {
        let v = Vocabulary::new(4);
        let samples: Vec<_> = answers.iter().zip(&lps).map(|(a, &lp)| sample(&v, *a, lp)).collect();
        match majority_vote(&samples) {
            None => prop_assert!(answers.iter().all(Option::is_none)),
            Some(i) => {
                let count = |a: Answer| samples.iter().filter(|s| s.trace.answer() == a).count();
                let chosen = samples[i].trace.answer();
                prop_assert!(chosen != Answer::Unanswered);
                let best = samples.iter().map(|s| s.trace.answer()).filter(|a| *a != Answer::Unanswered).map(count).max().unwrap();
                prop_assert_eq!(count(chosen), best);
            }
        }
    }

    #[test]
    fn best_of_n_picks_a_maximal_score(scores in prop::collection::vec(-1.0f64..1.0, 1..10)) {
        let v = Vocabulary::new(4);
        let samples: Vec<_> = scores.iter().map(|_| sample(&v, Some(0), -1.0)).collect();
        let i = best_of_n(&samples, &scores).unwrap();
        prop_assert!(scores.iter().all(|s| *s <= scores[i]));
    }

    #[test]
    fn preference_loss_is_symmetric_under_swap(d in -30.0f64..30.0, alpha in 0.0f64..1.0) {
        let (l, g) = preference_loss(d, alpha);
        let (ls, gs) = preference_loss(-d, 1.0 - alpha);
        prop_assert!((l - ls).abs() < 1e-9);
        prop_assert!((g + gs).abs() < 1e-9);
        prop_assert!(l >= 0.0);
        prop_assert!((preference_prob(d) + preference_prob(-d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn episodes_are_solvable_and_sampled_traces_render(seed in any::<u64>()) {
        let env = EnvConfig::default();
        let e = generate_episode(seed, &env).unwrap();
        let reference = reference_trace(&e);
        prop_assert!(judge(reference.answer(), &e));
        prop_assert_eq!(reference.num_steps(), e.hops + 1);

        let vocab = e.vocab();
        let cfg = PolicyConfig { num_symbols: env.num_symbols, obs_dim: env.encoding_dim, embed_dim: 4, hidden: 8 };
        let p = Policy::random(cfg, seed, 1.0);
        let ctx = e.context(env.encoding_dim).unwrap();
        let (t, lp) = p.sample_trace(&ctx, &e.grammar(DecodeMode::Reasoning), &e.episode_id, 1.0, seed, env.max_steps()).unwrap();
        prop_assert!(lp <= 0.0 && lp.is_finite());
        prop_assert!(t.num_steps() <= env.max_steps());
        let again = ReasoningTrace::from_text(&vocab, e.episode_id.clone(), &t.to_text(&vocab)).unwrap();
        prop_assert_eq!(again, t);
    }
}
