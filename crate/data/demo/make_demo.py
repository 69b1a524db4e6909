"""Regenerates the demo QA pairs, mock provider script and labelled queries.

    python3 data/demo/make_demo.py
"""
import itertools
import json
from pathlib import Path

HERE = Path(__file__).parent
K = 20
RESPONSES_PER_RULE = 7

PAIRS = [
    {
        "pair_id": "cert-time",
        "answer": "如您申请开具电子版证明，预计2个小时内发送至您指定的邮箱，纸质版证明开具时间预计3-8个工作日。",
        "questions": ["证明开具时间要多久？", "开证明需要几天", "多久能拿到证明", "证明什么时候能开好"],
        "tags": ["certificate"],
        "cores": ["证明开具要多久", "开证明要几天", "证明多久能开出来", "证明办理需要多长时间", "开个证明得等多久"],
    },
    {
        "pair_id": "phone-change",
        "answer": "登录后进入“我的-设置-账号安全”，选择修改手机号并完成短信验证即可。",
        "questions": ["怎么修改绑定的手机号", "手机号换了怎么改", "如何更换预留手机号码"],
        "tags": ["account"],
        "cores": ["绑定手机号怎么改", "怎样更换绑定的手机", "预留手机号如何修改", "换手机号后怎么重新绑定", "手机号码变更在哪里操作"],
    },
    {
        "pair_id": "refund-arrival",
        "answer": "退款成功后原路退回，银行卡一般1-3个工作日到账，零钱实时到账。",
        "questions": ["退款多久到账", "退的钱什么时候到", "退款几天能收到"],
        "tags": ["payment"],
        "cores": ["退款一般几天到账", "钱退回来要多久", "退款到账需要多长时间", "申请退款后多久能收到钱", "退款什么时候能到卡上"],
    },
    {
        "pair_id": "invoice",
        "answer": "订单完成后可在“订单详情-申请开票”中填写抬头信息，电子发票将发送至您的邮箱。",
        "questions": ["怎么开发票", "发票如何开具", "在哪里申请开票"],
        "tags": ["invoice"],
        "cores": ["发票怎么申请", "如何开电子发票", "订单发票在哪开", "开票入口在哪里", "怎样给订单开发票"],
    },
    {
        "pair_id": "password-reset",
        "answer": "在登录页点击“忘记密码”，通过手机验证码验证身份后即可设置新密码。",
        "questions": ["忘记密码怎么办", "密码忘了如何找回", "怎么重置登录密码"],
        "tags": ["account"],
        "cores": ["登录密码忘了怎么处理", "如何找回密码", "密码记不住了怎么重置", "忘了密码怎么登录", "重置密码在哪里操作"],
    },
]

PREFIXES = ["", "请问", "想问一下", "你好，", "麻烦问下", "我想知道", "客服你好，"]
SUFFIXES = ["？", "呢？", "啊", ""]


def variants(pair):
    out = []
    for core, prefix, suffix in itertools.product(pair["cores"], PREFIXES, SUFFIXES):
        q = f"{prefix}{core}{suffix}"
        if q not in pair["questions"]:
            out.append(q)
    return out


def numbered(questions):
    return "\n".join(f"{i + 1}. {q}" for i, q in enumerate(questions))


def main():
    with open(HERE / "qa.jsonl", "w", encoding="utf-8") as f:
        for p in PAIRS:
            rec = {k: p[k] for k in ("pair_id", "answer", "questions", "tags")}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")

    rules = []
    for p in PAIRS:
        src = p["questions"][0]
        pool = variants(p)
        assert len(pool) >= K * RESPONSES_PER_RULE, (p["pair_id"], len(pool))
        # Context-aware and intention-enhanced draw from the pool in
        # different orders so the two modes yield different question sets.
        ctx = [numbered(pool[i * K:(i + 1) * K]) for i in range(RESPONSES_PER_RULE)]
        rev = pool[::-1]
        intent = [numbered(rev[i * K:(i + 1) * K]) for i in range(RESPONSES_PER_RULE)]
        rules.append({"match": "prefix", "prompt": f"帮我生成{K}条与{src}相似的问句。", "responses": ctx})
        rules.append({"match": "prefix", "prompt": f"帮我根据问题{src}和答案", "responses": intent})
        rules.append({
            "match": "exact",
            "prompt": f"将输入的句子改写为保持相同意义但表述不同的新句子。\n{src}",
            "responses": pool[::2] + pool[1::2],
        })
    with open(HERE / "mock_script.jsonl", "w", encoding="utf-8") as f:
        for r in rules:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")

    queries = []
    for p in PAIRS:
        queries.append({"query": p["questions"][1], "expected_pair_id": p["pair_id"]})
        queries.append({"query": f"您好，{p['cores'][2]}", "expected_pair_id": p["pair_id"]})
        queries.append({"query": f"{p['cores'][4]}啊", "expected_pair_id": p["pair_id"]})
    with open(HERE / "queries.jsonl", "w", encoding="utf-8") as f:
        for q in queries:
            f.write(json.dumps(q, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
