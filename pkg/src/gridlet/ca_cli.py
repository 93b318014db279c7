"""Certificate authority command line: init, issue-user, issue-server.

A user identity lands in a PKCS#12 keystore (passphrase from
GRIDLET_PASSPHRASE or --passphrase-env); a server identity lands as a
PEM pair next to the service's config. ``--anchors`` exports the CA
certificate into a trust-anchor directory as part of either call.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import pki


def _passphrase(args) -> str:
    env = args.passphrase_env
    value = os.environ.get(env)
    if value:
        return value
    import getpass

    return getpass.getpass(f"passphrase (or set ${env}): ")


def cmd_init(args) -> int:
    ca = pki.CertificateAuthority.create(args.dir, args.dn, valid_days=args.days)
    if args.anchors:
        ca.export_anchor(args.anchors, name=args.anchor_name)
    print(f"CA initialized at {args.dir} with DN {ca.dn}")
    return 0


def cmd_issue_user(args) -> int:
    ca = pki.CertificateAuthority.load(args.dir)
    ident = ca.issue(args.dn, pki.ROLE_USER, valid_days=args.days)
    path = pki.Keystore.save_identity(args.keystore, _passphrase(args), ident, name=args.name or "user")
    if args.anchors:
        ca.export_anchor(args.anchors, name=args.anchor_name)
    print(f"issued user {ident.dn}; keystore entry {path}")
    return 0


def cmd_issue_server(args) -> int:
    ca = pki.CertificateAuthority.load(args.dir)
    ident = ca.issue(args.dn, pki.ROLE_SERVER, valid_days=args.days)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    cert = prefix.with_name(prefix.name + ".pem")
    key = prefix.with_name(prefix.name + ".key.pem")
    ident.write_pem_pair(cert, key)
    if args.anchors:
        ca.export_anchor(args.anchors, name=args.anchor_name)
    print(f"issued server {ident.dn}; cert {cert}, key {key}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridlet-ca", description="test-scale certificate authority")
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="create a new CA")
    p_init.add_argument("--dir", required=True, help="CA directory")
    p_init.add_argument("--dn", required=True, help="CA distinguished name")
    p_init.add_argument("--days", type=int, default=3650)

    p_user = sub.add_parser("issue-user", help="issue a user certificate into a keystore")
    p_user.add_argument("--dir", required=True, help="CA directory")
    p_user.add_argument("--dn", required=True)
    p_user.add_argument("--keystore", required=True, help=".p12 file or keystore directory")
    p_user.add_argument("--name", help="entry name inside the keystore")
    p_user.add_argument("--days", type=int, default=365)
    p_user.add_argument("--passphrase-env", default="GRIDLET_PASSPHRASE")

    p_server = sub.add_parser("issue-server", help="issue a server certificate as a PEM pair")
    p_server.add_argument("--dir", required=True, help="CA directory")
    p_server.add_argument("--dn", required=True)
    p_server.add_argument("--out-prefix", required=True, help="writes <prefix>.pem and <prefix>.key.pem")
    p_server.add_argument("--days", type=int, default=365)

    for p in (p_init, p_user, p_server):
        p.add_argument("--anchors", help="also export the CA cert into this anchors directory")
        p.add_argument("--anchor-name", default="ca")

    args = parser.parse_args(argv)
    try:
        if args.command == "init":
            return cmd_init(args)
        if args.command == "issue-user":
            return cmd_issue_user(args)
        return cmd_issue_server(args)
    except pki.PkiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
