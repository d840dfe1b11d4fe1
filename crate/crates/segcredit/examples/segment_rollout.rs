//! Parse a raw rollout into segments and boundary states.
//!
//! ```bash
//! cargo run -p segcredit --example segment_rollout
//! ```

use segcredit::trajectory::{model_token_set, segment_rollout, RawRollout};

fn main() {
    // Two tool calls: each invoke ends at its closing fence, each
    // assimilate at </context>, and the commit at <eos>. The raw tool
    // output is passed out-of-band; its injection point is marked by the
    // <tool_output/> line.
    let text = "\
the first hop needs a lookup
```
search ( ent3 rel2 )
```
<tool_output/>
<context>
ent3 rel2 ent17
</context>
one more hop
```
search ( ent17 rel5 )
```
<tool_output/>
<context>
ent17 rel5 ent40
</context>
the answer is \\boxed{ent40}
<eos>";
    let tool_outputs = vec![
        "ent3 rel2 ent17\nent9 rel1 ent3\nent2 rel2 ent8".to_string(),
        "ent17 rel5 ent40\nent17 rel3 ent6\nent1 rel5 ent12".to_string(),
    ];
    let raw = RawRollout {
        question_id: "demo",
        prompt: "what is rel5 of rel2 of ent3",
        text,
        tool_outputs: &tool_outputs,
        reward: 1.0,
    };

    let traj = segment_rollout(&raw).expect("well-formed rollout");
    println!("segments: {} (2K+1 with K = {})", traj.segments.len(), traj.invoke_count());
    for (k, seg) in traj.segments.iter().enumerate() {
        let tokens = model_token_set(&traj, k).unwrap();
        println!(
            "  [{k}] {:?}, {} model tokens, span {:?}",
            seg.kind,
            tokens.len(),
            seg.span
        );
    }
    println!("boundaries:");
    for b in &traj.boundaries {
        let tags: Vec<_> = b.blocks.iter().map(|bl| format!("{:?}", bl.tag)).collect();
        println!("  s{} {:?}: [{}]", b.index, b.kind, tags.join(", "));
    }
    println!("environment token indices: {:?}", traj.env_token_indices);
    traj.validate().expect("structural invariants hold");

    // Round-trip through the JSONL wire format.
    let line = traj.to_jsonl();
    let back = segcredit::trajectory::Trajectory::from_jsonl(&line).unwrap();
    assert_eq!(traj, back);
    println!("wire round-trip: structurally equal ({} bytes)", line.len());

    // A malformed rollout reports the byte offset of the violation.
    let broken = "look\n```\nsearch ( a b )\n```\n<tool_output/>\n<context>\nfact\n```\nmore\n```\n<eos>";
    let err = segment_rollout(&RawRollout {
        question_id: "demo2",
        prompt: "q",
        text: broken,
        tool_outputs: &["x".to_string(), "y".to_string()],
        reward: 0.0,
    })
    .unwrap_err();
    println!("malformed rollout: {err}");
}
